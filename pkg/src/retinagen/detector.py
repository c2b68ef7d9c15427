"""Retinal severity detector: stacked conv/pool blocks ending in a 1x1
bottleneck feature, plus a dense regression head on the 0-4 grade axis.

The architecture is data-driven through :class:`DetectorConfig` so the same
code serves the full 512-input network and small desk/test configs.  Every
forward pass can record the per-layer feature stack and pooling argmax maps
that the mirror network in :mod:`retinagen.activation` consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .archive import ModelCheckpoint, state_dict_to_tensors, tensors_to_state_dict
from .errors import ConfigurationError, NumericError, TrainingDiverged


@dataclass
class ConvSpec:
    channels: int
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ConfigurationError(
                f"conv kernel must be odd for aligned same-padding, got {self.kernel}")
        if self.stride != 1:
            raise ConfigurationError("detector convs are stride 1; pooling does the downsampling")


@dataclass
class BlockSpec:
    convs: list
    pool_kernel: int = 2
    pool_stride: int = 2

    def __post_init__(self):
        self.convs = [c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.convs]


@dataclass
class DetectorConfig:
    """Architecture description for the severity network.

    ``input_size`` is the square input resolution; spatial size after all
    blocks must come out exactly 1x1 so the bottleneck is
    ``1 x 1 x bottleneck_channels``.
    """

    input_size: int = 512
    in_channels: int = 3
    blocks: list = field(default_factory=list)
    bottleneck_channels: int = 1024
    head_hidden: list = field(default_factory=list)
    batch_norm: bool = True
    nonlinearity: str = "leaky_relu"   # detector gate; the mirror always gates with plain ReLU
    leak: float = 0.01
    conv_bias: bool = True

    def __post_init__(self):
        self.blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks]
        if self.nonlinearity not in ("leaky_relu", "relu"):
            raise ConfigurationError(f"unsupported nonlinearity {self.nonlinearity!r}")
        if not self.blocks:
            raise ConfigurationError("detector needs at least one block")
        if self.blocks[-1].convs[-1].channels != self.bottleneck_channels:
            raise ConfigurationError(
                "last conv channels must equal bottleneck_channels "
                f"({self.blocks[-1].convs[-1].channels} != {self.bottleneck_channels})")
        if self.final_spatial_size() != 1:
            raise ConfigurationError(
                f"blocks reduce {self.input_size} to {self.final_spatial_size()}, expected 1")

    def final_spatial_size(self):
        size = self.input_size
        for block in self.blocks:
            size = (size - block.pool_kernel) // block.pool_stride + 1
        return size

    def layer_sizes(self):
        """Spatial size at the input of every block (index 0 = network input)."""
        sizes = [self.input_size]
        for block in self.blocks:
            sizes.append((sizes[-1] - block.pool_kernel) // block.pool_stride + 1)
        return sizes

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_config():
    """Full-scale config: 512 input, nine conv blocks, 1024-channel bottleneck."""
    widths = [32, 32, 64, 64, 128, 128, 256, 512, 1024]
    blocks = [BlockSpec(convs=[ConvSpec(w), ConvSpec(w)]) for w in widths]
    return DetectorConfig(input_size=512, blocks=blocks, bottleneck_channels=1024)

def desk_config(input_size=64, bottleneck_channels=128):
    """Reduced config for desk-scale runs and tests (64 input by default)."""
    import math

    n_blocks = int(math.log2(input_size))
    if 2 ** n_blocks != input_size:
        raise ConfigurationError(f"desk config wants a power-of-two input, got {input_size}")
    widths = [min(bottleneck_channels, 8 * 2 ** i) for i in range(n_blocks)]
    widths[-1] = bottleneck_channels
    blocks = [BlockSpec(convs=[ConvSpec(w), ConvSpec(w)]) for w in widths]
    return DetectorConfig(input_size=input_size, blocks=blocks,
                          bottleneck_channels=bottleneck_channels)


class SeverityDetector(nn.Module):
    """Conv/pool severity network with a recordable feature stack.

    The logical layer table (`layer_table()`) lists one row per conv,
    activation, pool, and dense layer in forward order; the activation
    mirror is built against that table.
    """

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        self.convs = nn.ModuleDict()
        self.norms = nn.ModuleDict()
        self.denses = nn.ModuleDict()
        self._rows = []

        in_ch = config.in_channels
        for bi, block in enumerate(config.blocks, 1):
            for ci, spec in enumerate(block.convs, 1):
                cid = f"b{bi}_conv{ci}"
                self.convs[cid] = nn.Conv2d(in_ch, spec.channels, spec.kernel,
                                            stride=1, padding=spec.kernel // 2,
                                            bias=config.conv_bias)
                if config.batch_norm:
                    self.norms[cid] = nn.BatchNorm2d(spec.channels)
                self._rows.append({"kind": "conv", "id": cid})
                self._rows.append({"kind": "act", "id": f"b{bi}_act{ci}"})
                in_ch = spec.channels
            self._rows.append({"kind": "pool", "id": f"b{bi}_pool",
                               "kernel": block.pool_kernel, "stride": block.pool_stride})

        dims = [config.bottleneck_channels] + list(config.head_hidden) + [1]
        for hi in range(len(dims) - 1):
            hid = f"head{hi}" if len(dims) > 2 else "head"
            self.denses[hid] = nn.Linear(dims[hi], dims[hi + 1])
            self._rows.append({"kind": "dense", "id": hid})

    def layer_table(self):
        return list(self._rows)

    def act_fn(self, x):
        if self.config.nonlinearity == "relu":
            return F.relu(x)
        return F.leaky_relu(x, self.config.leak)

    def folded_conv(self, cid):
        """Effective (weight, bias) of a conv with its batch norm folded in.

        Uses the norm's stored running statistics, i.e. the inference-mode
        affine map; without batch norm this is just the raw parameters.
        """
        conv = self.convs[cid]
        w = conv.weight.detach()
        b = conv.bias.detach() if conv.bias is not None else torch.zeros(w.shape[0])
        if cid in self.norms:
            bn = self.norms[cid]
            scale = bn.weight.detach() / torch.sqrt(bn.running_var.detach() + bn.eps)
            w = w * scale.view(-1, 1, 1, 1)
            b = (b - bn.running_mean.detach()) * scale + bn.bias.detach()
        return w, b

    def _run(self, x, record):
        """Apply the layer table to a batch; optionally record every output."""
        stack = FeatureStack(input_shape=tuple(x.shape)) if record else None
        for row in self._rows:
            kind, lid = row["kind"], row["id"]
            if kind == "conv":
                x = self.convs[lid](x)
                if lid in self.norms:
                    x = self.norms[lid](x)
            elif kind == "act":
                x = self.act_fn(x)
            elif kind == "pool":
                if record:
                    stack.pool_input_sizes[lid] = (x.shape[2], x.shape[3])
                x, idx = F.max_pool2d(x, row["kernel"], row["stride"], return_indices=True)
                if record:
                    stack.pool_indices[lid] = idx
            else:  # dense
                if x.dim() == 4:
                    if record:
                        stack.bottleneck = x.detach()
                    x = x.flatten(1)
                x = self.denses[lid](x)
            if record:
                if not torch.isfinite(x).all():
                    raise NumericError(f"non-finite activations at layer {lid}")
                stack.outputs[lid] = x.detach()
        return x, stack

    def forward(self, x):
        score, _ = self._run(x, record=False)
        return score.squeeze(-1)


@dataclass
class FeatureStack:
    """Per-layer outputs, pooling argmax maps, and the bottleneck feature."""

    input_shape: tuple
    outputs: dict = field(default_factory=dict)
    pool_indices: dict = field(default_factory=dict)
    pool_input_sizes: dict = field(default_factory=dict)
    bottleneck: torch.Tensor = None

    @property
    def bottleneck_vector(self):
        return self.bottleneck.reshape(self.bottleneck.shape[0], -1)


def _as_model(detector):
    if isinstance(detector, ModelCheckpoint):
        return detector_from_checkpoint(detector)
    return detector


def _image_to_batch(image, config):
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ConfigurationError(f"expected an HxWxC image, got shape {arr.shape}")
    h, w, c = arr.shape
    if (h, w) != (config.input_size, config.input_size) or c != config.in_channels:
        raise ConfigurationError(
            f"image shape {arr.shape} does not match config "
            f"({config.input_size}, {config.input_size}, {config.in_channels})")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def forward_features(image, detector) -> FeatureStack:
    """Inference forward pass recording all intermediate activations.

    ``image`` is HxWx3 in [0, 1]; ``detector`` is a built model or a
    checkpoint.  Deterministic: normalization layers use stored statistics.
    """
    model = _as_model(detector)
    model.eval()
    with torch.no_grad():
        _, stack = model._run(_image_to_batch(image, model.config), record=True)
    return stack


def predict_severity(image, detector) -> float:
    """Severity on the 0-4 axis: the dense head applied to the bottleneck."""
    model = _as_model(detector)
    model.eval()
    with torch.no_grad():
        score, _ = model._run(_image_to_batch(image, model.config), record=False)
    return float(score.reshape(-1)[0])


def build_detector(config, seed=0):
    torch.manual_seed(seed)
    return SeverityDetector(config)


def detector_to_checkpoint(model) -> ModelCheckpoint:
    return ModelCheckpoint(kind="detector", config=model.config.to_dict(),
                           tensors=state_dict_to_tensors(model.state_dict()))


def detector_from_checkpoint(ckpt: ModelCheckpoint) -> SeverityDetector:
    if ckpt.kind != "detector":
        raise ConfigurationError(f"expected a detector checkpoint, got {ckpt.kind!r}")
    model = SeverityDetector(DetectorConfig.from_dict(ckpt.config))
    model.load_state_dict(tensors_to_state_dict(ckpt.tensors))
    model.eval()
    return model


@dataclass
class AugmentConfig:
    """Switchable training-time augmentations."""

    resample: bool = False     # class-balanced resampling of the grade labels
    stretch: bool = False      # random isotropic stretch, crop/pad back
    rotate: bool = False       # random rotation about the center
    flip: bool = False         # horizontal/vertical flips
    color: bool = False        # brightness/saturation jitter

    def enabled(self):
        return any((self.resample, self.stretch, self.rotate, self.flip, self.color))


@dataclass
class DetectorSchedule:
    steps: int = 100
    batch_size: int = 4
    lr: float = 0.003
    momentum: float = 0.9
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)


def _augment_image(img, rng, aug: AugmentConfig):
    from scipy import ndimage

    out = img
    if aug.stretch:
        factor = rng.uniform(0.9, 1.1)
        zoomed = ndimage.zoom(out, (factor, factor, 1.0), order=1, mode="reflect")
        h, w = out.shape[:2]
        zh, zw = zoomed.shape[:2]
        if zh >= h:
            top, left = (zh - h) // 2, (zw - w) // 2
            out = zoomed[top:top + h, left:left + w]
        else:
            pad_h, pad_w = h - zh, w - zw
            out = np.pad(zoomed, ((pad_h // 2, pad_h - pad_h // 2),
                                  (pad_w // 2, pad_w - pad_w // 2), (0, 0)), mode="reflect")
    if aug.rotate:
        angle = rng.uniform(0.0, 360.0)
        out = ndimage.rotate(out, angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
    if aug.flip:
        if rng.random() < 0.5:
            out = out[:, ::-1]
        if rng.random() < 0.5:
            out = out[::-1, :]
    if aug.color:
        out = out * rng.uniform(0.9, 1.1)
        gray = out.mean(axis=2, keepdims=True)
        out = gray + (out - gray) * rng.uniform(0.9, 1.1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class DetectorTrainResult:
    checkpoint: ModelCheckpoint
    losses: list


def train_detector(dataset, config: DetectorConfig, schedule: DetectorSchedule) -> DetectorTrainResult:
    """Fit the severity head with Nesterov-momentum SGD on (image, grade) pairs.

    ``dataset`` is a sequence of (HxWx3 float image in [0,1], grade in 0..4).
    Aborts with :class:`TrainingDiverged` on a non-finite loss.
    """
    pairs = list(dataset)
    if not pairs:
        raise ConfigurationError("empty dataset")
    rng = np.random.default_rng(schedule.seed)
    model = build_detector(config, seed=schedule.seed)
    if schedule.steps == 0:
        return DetectorTrainResult(detector_to_checkpoint(model), [])
    opt = torch.optim.SGD(model.parameters(), lr=schedule.lr,
                          momentum=schedule.momentum, nesterov=True)

    grades = np.array([float(g) for _, g in pairs])
    if schedule.augment.resample:
        counts = {g: (grades == g).sum() for g in np.unique(grades)}
        weights = np.array([1.0 / counts[g] for g in grades])
        weights = weights / weights.sum()
    else:
        weights = None

    model.train()
    losses = []
    for step in range(schedule.steps):
        idx = rng.choice(len(pairs), size=min(schedule.batch_size, len(pairs)),
                         replace=True, p=weights)
        imgs, targets = [], []
        for i in idx:
            img, grade = pairs[i]
            img = np.asarray(img, dtype=np.float32)
            if schedule.augment.enabled():
                img = _augment_image(img, rng, schedule.augment)
            imgs.append(img.transpose(2, 0, 1))
            targets.append(float(grade))
        batch = torch.from_numpy(np.stack(imgs))
        target = torch.tensor(targets)

        opt.zero_grad()
        pred = model(batch)
        loss = F.mse_loss(pred, target)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite training loss at step {step}")
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

    model.eval()
    return DetectorTrainResult(detector_to_checkpoint(model), losses)
