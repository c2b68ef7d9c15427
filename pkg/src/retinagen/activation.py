"""Mirror network over a severity detector and per-layer activation
projections.

The mirror reverses the detector layer by layer: convolutions become
transposed convolutions sharing the (norm-folded) forward weights, max-pool
layers become unpooling scatters driven by the recorded argmax maps, each
forward gate becomes a plain ReLU that drops negative projections, and the
dense head becomes a 1x1 transposed convolution.  Walking the mirror from
the bottleneck yields projections at every layer's input space, down to the
image-resolution map that localizes lesions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .archive import ModelCheckpoint, save_archive, load_archive
from .detector import SeverityDetector, detector_from_checkpoint
from .errors import ConfigurationError

INPUT_KEY = "input"


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation primitive used by the forward pass."""
    return F.conv2d(x, w, stride=stride, padding=padding)


def conv2d_transpose(y, w, stride=1, padding=0, output_size=None):
    """Exact adjoint of :func:`conv2d` with the same geometry.

    ``output_size`` pins the spatial result when strided shapes are
    ambiguous; positions the forward pass never read come back as zeros.
    """
    output_padding = 0
    if output_size is not None:
        k = w.shape[2]
        implied = (y.shape[2] - 1) * stride - 2 * padding + k
        output_padding = output_size - implied
        if output_padding != 0 and not 0 <= output_padding < stride:
            raise ConfigurationError(
                f"output size {output_size} unreachable from {tuple(y.shape)} "
                f"with stride {stride}, kernel {k}, padding {padding}")
    return F.conv_transpose2d(y, w, stride=stride, padding=padding,
                              output_padding=output_padding)


@dataclass
class MirrorLayer:
    kind: str           # "conv_t" | "relu" | "unpool" | "dense_t"
    forward_id: str
    weight: torch.Tensor = None
    padding: int = 0
    kernel: int = 0
    stride: int = 1


@dataclass
class ActivationNet:
    """Reversed detector: one mirror layer per forward layer."""

    layers: list
    taps: dict            # tap level -> forward row id whose record is A_level
    tap_strides: dict     # tap level -> downsampling factor vs input
    input_size: int
    in_channels: int

    def layer_count(self):
        return len(self.layers)


def _default_taps(model: SeverityDetector):
    """A_0 at image space; A_l (l >= 1) at the gated input of pool l+1."""
    taps = {0: INPUT_KEY}
    strides = {0: 1}
    n_blocks = len(model.config.blocks)
    stride = 1
    for level in (1, 2):
        bi = level + 1
        if bi > n_blocks:
            break
        n_convs = len(model.config.blocks[bi - 1].convs)
        taps[level] = f"b{bi}_act{n_convs}"
        strides[level] = 2 ** level
    return taps, strides


def build_activation_net(detector) -> ActivationNet:
    """Construct the mirror net for a detector model or checkpoint.

    Batch norms are folded into the forward conv weights first, so the
    mirror consists purely of transposed convs, unpooling, and ReLU gates.
    """
    model = detector_from_checkpoint(detector) if isinstance(detector, ModelCheckpoint) else detector
    model.eval()
    layers = []
    for row in reversed(model.layer_table()):
        kind, lid = row["kind"], row["id"]
        if kind == "conv":
            w, _ = model.folded_conv(lid)
            layers.append(MirrorLayer("conv_t", lid, weight=w.clone(),
                                      padding=w.shape[2] // 2, kernel=w.shape[2]))
        elif kind == "act":
            layers.append(MirrorLayer("relu", lid))
        elif kind == "pool":
            layers.append(MirrorLayer("unpool", lid, kernel=row["kernel"], stride=row["stride"]))
        elif kind == "dense":
            w = model.denses[lid].weight.detach().clone()
            layers.append(MirrorLayer("dense_t", lid, weight=w[:, :, None, None]))
        else:
            raise ConfigurationError(f"cannot mirror layer {lid!r} of kind {kind!r}")
    taps, tap_strides = _default_taps(model)
    return ActivationNet(layers=layers, taps=taps, tap_strides=tap_strides,
                         input_size=model.config.input_size,
                         in_channels=model.config.in_channels)


@dataclass
class ActivationStack:
    """Projections keyed by forward layer id, plus the named A_l taps."""

    projections: dict = field(default_factory=dict)
    taps: dict = field(default_factory=dict)
    tap_strides: dict = field(default_factory=dict)

    def tap(self, level) -> np.ndarray:
        """Projection A_level as a (C, h, w) array."""
        key = self.taps[level]
        return self.projections[key]

    def scalar_map(self, level=0) -> np.ndarray:
        """Channel-sum collapse of A_level to a single (h, w) heat map."""
        return self.tap(level).sum(axis=0)

    def save(self, path):
        tensors = {key: arr for key, arr in self.projections.items()}
        meta = {"format": "retinagen-activations", "version": 1,
                "taps": {str(k): v for k, v in self.taps.items()},
                "tap_strides": {str(k): v for k, v in self.tap_strides.items()}}
        save_archive(path, tensors, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = load_archive(path)
        return cls(projections=tensors,
                   taps={int(k): v for k, v in meta["taps"].items()},
                   tap_strides={int(k): v for k, v in meta["tap_strides"].items()})


def project(features, net: ActivationNet, keep="all", start="bottleneck") -> ActivationStack:
    """Back-project the bottleneck through the mirror net.

    Transposed convs spread the running projection with the shared weights,
    unpooling scatters values to the recorded argmax positions (zeros
    elsewhere), ReLU gates drop negative projections.  The projection after
    each mirror layer is recorded under the forward layer id whose input
    space it reaches; the final image-space map is stored under ``"input"``
    and rectified so every tap is non-negative.

    ``keep="taps"`` records only the configured A_l taps to save memory.
    ``start="severity"`` additionally walks the dense-head mirrors, seeding
    the projection from the scalar prediction instead of the bottleneck.
    """
    if features.bottleneck is None:
        raise ConfigurationError("feature stack has no bottleneck; was it recorded?")
    record_ids = None if keep == "all" else set(net.taps.values())
    stack = ActivationStack(taps=dict(net.taps), tap_strides=dict(net.tap_strides))

    if start == "severity":
        current = features.outputs[net.layers[0].forward_id].reshape(1, -1, 1, 1)
    else:
        current = features.bottleneck
    current = current.detach()
    for layer in net.layers:
        if layer.kind == "dense_t":
            if start != "severity":
                continue
            current = F.conv_transpose2d(current, layer.weight)
        elif layer.kind == "conv_t":
            current = conv2d_transpose(current, layer.weight, stride=1, padding=layer.padding)
        elif layer.kind == "relu":
            current = F.relu(current)
        else:  # unpool
            pid = layer.forward_id
            if pid not in features.pool_indices:
                raise ConfigurationError(f"feature stack is missing argmax maps for {pid}")
            indices = features.pool_indices[pid]
            if indices.shape[-2:] != current.shape[-2:] or indices.shape[1] != current.shape[1]:
                raise ConfigurationError(
                    f"projection shape {tuple(current.shape)} does not match recorded "
                    f"pool geometry {tuple(indices.shape)} at {pid}")
            current = F.max_unpool2d(current, indices, layer.kernel, layer.stride,
                                     output_size=features.pool_input_sizes[pid])
        if record_ids is None or layer.forward_id in record_ids:
            stack.projections[layer.forward_id] = current[0].numpy().copy()

    stack.projections[INPUT_KEY] = F.relu(current)[0].numpy().copy()
    return stack


def heatmap_png(path, scalar_map, colormap="inferno"):
    """Write a normalized heat-map PNG for a scalar activation map."""
    from matplotlib import colormaps
    from PIL import Image

    arr = np.asarray(scalar_map, dtype=np.float64)
    top = arr.max()
    norm = arr / top if top > 0 else np.zeros_like(arr)
    rgba = colormaps[colormap](norm)
    Image.fromarray((rgba[:, :, :3] * 255).astype(np.uint8)).save(path)
    return path
