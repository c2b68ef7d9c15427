"""Conditional fundus generator and discriminator with the three training
losses (adversarial, perceptual, severity) and the 2:1 update schedule.

The generator is a U-shaped encoder-decoder: six stride-2
Conv-BatchNorm-LeakyReLU down blocks, a noise block joined at the
bottleneck, and six Resize-Convolution-BatchNorm up blocks (no transposed
convolutions, which would reintroduce checkerboard artifacts).
Reconstructed descriptor maps enter the down path at their native
half/quarter resolutions; skip connections carry detail to the up path.
Networks compute in [-1, 1] internally; the public boundary is [0, 1].
"""

from __future__ import annotations

import copy
import csv
import math
import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from scipy import ndimage

from .archive import ModelCheckpoint, state_dict_to_tensors, tensors_to_state_dict
from .descriptors import DescriptorSet, reconstruct_projections
from .errors import ConfigurationError, NumericError, TrainingDiverged

PROB_EPS = 1e-7
NOISE_DIM = 400
NOISE_SIGMA_TRAIN = 0.001
NOISE_SIGMA_TEST = 0.1


@dataclass
class LossWeights:
    w_percept: float = 1.0
    w_severity: float = 10.0

    def __post_init__(self):
        if self.w_percept < 0 or self.w_severity < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass
class GeneratorConfig:
    image_size: int = 512
    kernel: int = 4                      # 4 or 3
    down_channels: tuple = (64, 128, 256, 512, 512, 512)
    up_channels: tuple = (512, 512, 256, 128, 64, 64)
    desc_channels: tuple = (32, 64)      # channels of the tap-1 / tap-2 descriptor maps
    noise_dim: int = NOISE_DIM
    noise_channels: int = 64
    skip_connections: bool = True

    def __post_init__(self):
        if self.kernel not in (3, 4):
            raise ConfigurationError(f"generator kernel must be 3 or 4, got {self.kernel}")
        if self.image_size % 64 != 0:
            raise ConfigurationError("image size must be a multiple of 64 (six stride-2 blocks)")
        if len(self.down_channels) != 6 or len(self.up_channels) != 6:
            raise ConfigurationError("generator wants six down and six up blocks")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("down_channels", "up_channels", "desc_channels"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class DiscriminatorConfig:
    image_size: int = 512
    kernel: int = 4
    channels: tuple = (64, 128, 256, 512, 512)

    def __post_init__(self):
        if self.kernel not in (3, 4):
            raise ConfigurationError(f"discriminator kernel must be 3 or 4, got {self.kernel}")
        if len(self.channels) != 5:
            raise ConfigurationError("discriminator wants five blocks")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def _down_block(in_ch, out_ch, kernel, with_norm):
    pad = 1  # halves even inputs for both kernel 3 and 4
    mods = [nn.Conv2d(in_ch, out_ch, kernel, stride=2, padding=pad)]
    if with_norm:
        mods.append(nn.BatchNorm2d(out_ch))
    mods.append(nn.LeakyReLU(0.2, inplace=True))
    return nn.Sequential(*mods)


class _UpBlock(nn.Module):
    """Nearest-neighbor resize followed by a stride-1 convolution."""

    def __init__(self, in_ch, out_ch, with_norm):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=1, padding=1)
        self.norm = nn.BatchNorm2d(out_ch) if with_norm else None

    def forward(self, x):
        x = self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
        if self.norm is not None:
            x = self.norm(x)
        return F.relu(x, inplace=True)


class FundusGenerator(nn.Module):
    """Vessel mask + descriptor maps + noise code -> fundus image in [-1, 1]."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        dc = config.down_channels
        c1, c2 = config.desc_channels
        bottleneck = config.image_size // 64

        ins = [1, dc[0] + c1, dc[1] + c2, dc[2], dc[3], dc[4]]
        self.down = nn.ModuleList([
            _down_block(ins[i], dc[i], config.kernel,
                        with_norm=config.image_size // 2 ** (i + 1) > 1)
            for i in range(6)])

        self.noise_fc = nn.Linear(config.noise_dim,
                                  config.noise_channels * bottleneck * bottleneck)
        self.noise_conv = nn.Conv2d(config.noise_channels, config.noise_channels,
                                    3, padding=1)

        uc = config.up_channels
        skips = [dc[4], dc[3], dc[2], dc[1] + c2, dc[0] + c1, 0]
        up_ins = [dc[5] + config.noise_channels]
        for i in range(1, 6):
            up_ins.append(uc[i - 1] + (skips[i - 1] if config.skip_connections else 0))
        self.up = nn.ModuleList([
            _UpBlock(up_ins[i], uc[i], with_norm=True) for i in range(6)])
        self.to_rgb = nn.Conv2d(uc[5], 3, 3, padding=1)

    def forward(self, vessels, desc_maps, z):
        """``vessels`` (B,1,H,W) in {0,1}; ``desc_maps`` {1: (B,c1,H/2,W/2),
        2: (B,c2,H/4,W/4)}; ``z`` (B, noise_dim)."""
        size = self.config.image_size
        if vessels.shape[-2:] != (size, size):
            raise ConfigurationError(
                f"vessel mask {tuple(vessels.shape)} does not match generator size {size}")
        d = []
        x = vessels
        for i, block in enumerate(self.down):
            x = block(x)
            if i == 0:
                x = torch.cat([x, desc_maps[1]], dim=1)
            elif i == 1:
                x = torch.cat([x, desc_maps[2]], dim=1)
            d.append(x)

        b = self.config.image_size // 64
        zb = self.noise_conv(self.noise_fc(z).reshape(-1, self.config.noise_channels, b, b))
        x = torch.cat([d[5], zb], dim=1)

        skips = [d[4], d[3], d[2], d[1], d[0], None]
        for i, block in enumerate(self.up):
            x = block(x)
            if self.config.skip_connections and skips[i] is not None:
                x = torch.cat([x, skips[i]], dim=1)
        return torch.tanh(self.to_rgb(x))


class FundusDiscriminator(nn.Module):
    """(image, vessel mask) -> probability the pair is real.

    Channel order is fixed: the 3 image channels first, then the mask.
    """

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        ins = [4] + list(ch[:-1])
        self.blocks = nn.ModuleList([
            _down_block(ins[i], ch[i], config.kernel,
                        with_norm=config.image_size // 2 ** (i + 1) > 1)
            for i in range(5)])
        self.head = nn.Linear(ch[-1], 1)

    def forward(self, image, vessels):
        if image.shape[-2:] != vessels.shape[-2:]:
            raise ConfigurationError(
                f"image {tuple(image.shape)} and mask {tuple(vessels.shape)} sizes differ")
        x = torch.cat([image, vessels], dim=1)
        for block in self.blocks:
            x = block(x)
        x = x.mean(dim=(2, 3))
        return torch.sigmoid(self.head(x)).squeeze(-1)


# ---------------------------------------------------------------------------
# Value-range plumbing between the [0,1] boundary and the [-1,1] internals.

def _to_batch(image):
    """HxWx3 [0,1] numpy -> (1,3,H,W) float tensor, unchanged range."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ConfigurationError(f"expected an HxWx3 image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def _mask_to_batch(mask):
    arr = np.asarray(mask, dtype=np.float32)
    if arr.ndim != 2:
        raise ConfigurationError(f"expected an HxW vessel mask, got shape {arr.shape}")
    values = np.unique(arr)
    if not np.isin(values, (0.0, 1.0)).all():
        raise ConfigurationError("vessel mask must be binary (values 0/1)")
    return torch.from_numpy(np.ascontiguousarray(arr))[None, None]


def _signed(x01):
    return x01 * 2.0 - 1.0


def _unsigned(xpm):
    return (xpm + 1.0) / 2.0


# ---------------------------------------------------------------------------
# Losses.  All return 0-dim tensors so they can sit in an autograd graph;
# wrap with float() for plain numbers.

def clamp_prob(p):
    if not torch.is_tensor(p):
        p = torch.as_tensor(float(p), dtype=torch.get_default_dtype())
    return torch.clamp(p, PROB_EPS, 1.0 - PROB_EPS)


def adv_loss_from_probs(p_real, p_fake):
    """log D(x,y) + log(1 - D(x_hat,y)); the quantity the discriminator maximizes."""
    return torch.log(clamp_prob(p_real)) + torch.log(1.0 - clamp_prob(p_fake))


def gen_adv_loss_from_prob(p_fake):
    """-log D(x_hat,y); the generator's simplified adversarial objective."""
    return -torch.log(clamp_prob(p_fake))


def discriminate(image, vessels, disc) -> float:
    """Probability in [0,1] that (image, mask) is a real pair."""
    model = discriminator_from_checkpoint(disc) if isinstance(disc, ModelCheckpoint) else disc
    model.eval()
    with torch.no_grad():
        p = model(_signed(_to_batch(image)), _mask_to_batch(vessels))
    return float(p.reshape(-1)[0])


def adversarial_loss(x, x_hat, vessels, disc):
    """Adversarial loss evaluated on a real/synthesized image pair."""
    model = discriminator_from_checkpoint(disc) if isinstance(disc, ModelCheckpoint) else disc
    return adv_loss_from_probs(discriminate(x, vessels, model),
                               discriminate(x_hat, vessels, model))

def generator_adv_loss(x_hat, vessels, disc):
    model = discriminator_from_checkpoint(disc) if isinstance(disc, ModelCheckpoint) else disc
    return gen_adv_loss_from_prob(discriminate(x_hat, vessels, model))


def perceptual_loss(x, x_hat, feature_net):
    """Mean absolute difference of fixed-extractor features.

    Accepts HxWx3 [0,1] arrays or (B,3,H,W) tensors in [0,1]; tensor inputs
    keep the autograd graph, array inputs return a plain value.
    """
    plain = isinstance(x, np.ndarray) and isinstance(x_hat, np.ndarray)
    xb = _to_batch(x) if isinstance(x, np.ndarray) else x
    xh = _to_batch(x_hat) if isinstance(x_hat, np.ndarray) else x_hat
    loss = (feature_net(xb) - feature_net(xh)).abs().mean()
    return loss.detach() if plain else loss


def severity_loss(x, x_hat, detector):
    """Absolute difference of frozen-detector severity predictions."""
    from .detector import detector_from_checkpoint

    model = detector_from_checkpoint(detector) if isinstance(detector, ModelCheckpoint) else detector
    model.eval()
    plain = isinstance(x, np.ndarray) and isinstance(x_hat, np.ndarray)
    xb = _to_batch(x) if isinstance(x, np.ndarray) else x
    xh = _to_batch(x_hat) if isinstance(x_hat, np.ndarray) else x_hat
    loss = (model(xb) - model(xh)).abs().mean()
    return loss.detach() if plain else loss


def total_generator_loss(adv, percept, severity, weights: LossWeights):
    """adv + w_percept * percept + w_severity * severity."""
    return adv + weights.w_percept * percept + weights.w_severity * severity


# ---------------------------------------------------------------------------
# Inference.

def sample_noise(dim=NOISE_DIM, sigma=NOISE_SIGMA_TEST, seed=None, rng=None):
    """Element-wise zero-mean Gaussian noise code."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    return rng.normal(0.0, sigma, size=dim).astype(np.float32)


def _desc_batch(dset: DescriptorSet, config: GeneratorConfig):
    size = config.image_size
    c1, c2 = config.desc_channels
    shapes = {1: (c1, size // 2, size // 2), 2: (c2, size // 4, size // 4)}
    stack = reconstruct_projections(dset, shapes)
    return {level: torch.from_numpy(stack.tap(level))[None] for level in (1, 2)}


def generate(vessels, dset: DescriptorSet, z, gen) -> np.ndarray:
    """Synthesize an HxWx3 fundus image in [0,1] from a vessel mask,
    a descriptor set (possibly empty), and a noise code."""
    model = generator_from_checkpoint(gen) if isinstance(gen, ModelCheckpoint) else gen
    model.eval()
    vb = _mask_to_batch(vessels)
    zb = torch.as_tensor(np.asarray(z, dtype=np.float32)).reshape(1, -1)
    if zb.shape[1] != model.config.noise_dim:
        raise ConfigurationError(
            f"noise code has dim {zb.shape[1]}, generator wants {model.config.noise_dim}")
    with torch.no_grad():
        out = model(vb, _desc_batch(dset, model.config), zb)
    if not torch.isfinite(out).all():
        raise NumericError("generator produced non-finite values")
    img = _unsigned(out)[0].numpy().transpose(1, 2, 0)
    return np.clip(img, 0.0, 1.0)


def generator_to_checkpoint(model) -> ModelCheckpoint:
    return ModelCheckpoint(kind="generator", config=model.config.to_dict(),
                           tensors=state_dict_to_tensors(model.state_dict()))


def generator_from_checkpoint(ckpt) -> FundusGenerator:
    if ckpt.kind != "generator":
        raise ConfigurationError(f"expected a generator checkpoint, got {ckpt.kind!r}")
    model = FundusGenerator(GeneratorConfig.from_dict(ckpt.config))
    model.load_state_dict(tensors_to_state_dict(ckpt.tensors))
    model.eval()
    return model


def discriminator_to_checkpoint(model) -> ModelCheckpoint:
    return ModelCheckpoint(kind="discriminator", config=model.config.to_dict(),
                           tensors=state_dict_to_tensors(model.state_dict()))


def discriminator_from_checkpoint(ckpt) -> FundusDiscriminator:
    if ckpt.kind != "discriminator":
        raise ConfigurationError(f"expected a discriminator checkpoint, got {ckpt.kind!r}")
    model = FundusDiscriminator(DiscriminatorConfig.from_dict(ckpt.config))
    model.load_state_dict(tensors_to_state_dict(ckpt.tensors))
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Training.

@dataclass
class GanSchedule:
    steps: int = 300                 # optimizer steps, cycled G,G,D
    seed: int = 0
    lr_generator: float = 2e-4
    lr_discriminator: float = 1e-4
    batch_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    noise_sigma: float = NOISE_SIGMA_TRAIN
    rotate: bool = True
    save_every: int = 100
    checkpoint_dir: str = None
    log_path: str = None


@dataclass
class GanTrainResult:
    generator: ModelCheckpoint
    discriminator: ModelCheckpoint
    log_rows: list
    g_updates: int
    d_updates: int


def rotate_sample(image, mask, dset: DescriptorSet, angle_deg):
    """Rotate an image/mask/descriptor triple jointly about the image center.

    The raster rotates with reflective fill; descriptor box centers follow
    the same rotation (crops are untouched), clamped back into bounds.
    """
    img = ndimage.rotate(image, angle_deg, axes=(1, 0), reshape=False,
                         order=1, mode="reflect")
    msk = ndimage.rotate(mask.astype(np.float32), angle_deg, axes=(1, 0),
                         reshape=False, order=0, mode="reflect")
    size = dset.image_size
    c = (size - 1) / 2.0
    rad = math.radians(angle_deg)
    cos_a, sin_a = math.cos(rad), math.sin(rad)
    moved = []
    for d in dset.descriptors:
        cy = d.box.top + d.box.height / 2.0 - 0.5
        cx = d.box.left + d.box.width / 2.0 - 0.5
        dy, dx = cy - c, cx - c
        ny = c + cos_a * dy - sin_a * dx
        nx = c + sin_a * dy + cos_a * dx
        left = int(round(nx - d.box.width / 2.0 + 0.5))
        top = int(round(ny - d.box.height / 2.0 + 0.5))
        left = min(max(left, 0), size - d.box.width)
        top = min(max(top, 0), size - d.box.height)
        moved.append(d.moved(left, top))
    return (np.clip(img, 0.0, 1.0), (msk > 0.5).astype(np.float32),
            replace(dset, descriptors=tuple(moved)))


def _snapshot(gen, disc):
    return (copy.deepcopy(gen.state_dict()), copy.deepcopy(disc.state_dict()))


def train_gan(dataset, gen_config: GeneratorConfig, disc_config: DiscriminatorConfig,
              schedule: GanSchedule, feature_net, detector) -> GanTrainResult:
    """Adversarial training over (image, vessel mask, descriptor set) triples.

    Generator and discriminator update in a fixed 2:1 cycle with Adam
    (separate learning rates).  ``feature_net`` and ``detector`` are frozen
    throughout.  Aborts with :class:`TrainingDiverged` on a non-finite loss,
    saving the last good snapshot when a checkpoint dir is configured.
    """
    triples = list(dataset)
    if not triples:
        raise ConfigurationError("empty dataset")
    if schedule.batch_size != 1:
        raise ConfigurationError("training runs at batch size 1")
    det_size = getattr(getattr(detector, "config", None), "input_size", None)
    if det_size is not None and det_size != gen_config.image_size:
        raise ConfigurationError(
            f"severity detector expects {det_size}px inputs, generator makes "
            f"{gen_config.image_size}px images")

    torch.manual_seed(schedule.seed)
    gen = FundusGenerator(gen_config)
    disc = FundusDiscriminator(disc_config)
    gen.train()
    disc.train()

    detector.eval()
    detector.requires_grad_(False)
    feature_net.eval()
    feature_net.requires_grad_(False)

    opt_g = torch.optim.Adam(gen.parameters(), lr=schedule.lr_generator)
    opt_d = torch.optim.Adam(disc.parameters(), lr=schedule.lr_discriminator)
    rng = np.random.default_rng(schedule.seed)

    log_rows = []
    g_updates = d_updates = 0
    good = _snapshot(gen, disc)
    weights = schedule.weights

    def _save(tag):
        if schedule.checkpoint_dir is None:
            return None
        os.makedirs(schedule.checkpoint_dir, exist_ok=True)
        gpath = os.path.join(schedule.checkpoint_dir, f"generator_{tag}.ckpt")
        dpath = os.path.join(schedule.checkpoint_dir, f"discriminator_{tag}.ckpt")
        generator_to_checkpoint(gen).save(gpath)
        discriminator_to_checkpoint(disc).save(dpath)
        return gpath

    def _abort(step, name):
        gen.load_state_dict(good[0])
        disc.load_state_dict(good[1])
        last = _save("last_good")
        raise TrainingDiverged(f"non-finite {name} at step {step}", last_checkpoint=last)

    for step in range(schedule.steps):
        image, mask, dset = triples[int(rng.integers(0, len(triples)))]
        if schedule.rotate:
            image, mask, dset = rotate_sample(image, mask, dset, rng.uniform(0.0, 360.0))
        x = _signed(_to_batch(image))
        y = _mask_to_batch(mask)
        desc = _desc_batch(dset, gen_config)
        z = torch.from_numpy(
            rng.normal(0.0, schedule.noise_sigma, gen_config.noise_dim)
            .astype(np.float32)).reshape(1, -1)

        if step % 3 == 2:  # discriminator turn
            with torch.no_grad():
                x_hat = gen(y, desc, z)
            p_real = disc(x, y)
            p_fake = disc(x_hat, y)
            l_adv = adv_loss_from_probs(p_real, p_fake)
            loss_d = -l_adv
            if not torch.isfinite(loss_d):
                _abort(step, "discriminator loss")
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            d_updates += 1
            log_rows.append({"step": step, "L_adv": float(l_adv.detach()),
                             "L_percept": "", "L_severity": "", "L_G": "",
                             "L_D": float(loss_d.detach())})
        else:  # generator turn
            x_hat = gen(y, desc, z)
            l_gadv = gen_adv_loss_from_prob(disc(x_hat, y))
            l_percept = perceptual_loss(_unsigned(x), _unsigned(x_hat), feature_net)
            l_severity = severity_loss(_unsigned(x), _unsigned(x_hat), detector)
            loss_g = total_generator_loss(l_gadv, l_percept, l_severity, weights)
            if not torch.isfinite(loss_g):
                _abort(step, "generator loss")
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            g_updates += 1
            log_rows.append({"step": step, "L_adv": "",
                             "L_percept": float(l_percept.detach()),
                             "L_severity": float(l_severity.detach()),
                             "L_G": float(loss_g.detach()), "L_D": ""})

        if (step + 1) % schedule.save_every == 0:
            good = _snapshot(gen, disc)
            _save(f"step{step + 1:06d}")

    gen.eval()
    disc.eval()
    if schedule.log_path:
        write_loss_log(schedule.log_path, log_rows)
    return GanTrainResult(generator=generator_to_checkpoint(gen),
                          discriminator=discriminator_to_checkpoint(disc),
                          log_rows=log_rows, g_updates=g_updates, d_updates=d_updates)


def write_loss_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "L_adv", "L_percept",
                                                "L_severity", "L_G", "L_D"])
        writer.writeheader()
        writer.writerows(rows)
    return path
