"""Quantitative evaluation: Frechet distance between embedded image sets,
paired mean squared error, the lesion-count-vs-severity experiment, and the
perceptual-weight ablation sweep.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .descriptors import multiply, sample_subset
from .errors import ConfigurationError, NumericError

CURVE_SCALES = (0.0, 0.25, 0.5, 0.75, 1.0, 2.0, 3.0, 4.0, 5.0)
PSD_TOL = -1e-6


def _sqrtm_psd(mat, tol=PSD_TOL):
    """Symmetric PSD square root by eigendecomposition with clipping."""
    sym = (mat + mat.T) / 2.0
    w, v = np.linalg.eigh(sym)
    floor = tol * max(1.0, float(np.abs(w).max()))
    if w.min() < floor:
        raise NumericError(f"non-PSD covariance beyond tolerance: min eigenvalue {w.min():g}")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}) with the cross
    term evaluated through the symmetrized product
    S_a^{1/2} S_b S_a^{1/2}, which shares its spectrum with S_a S_b.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigurationError("feature sets must be 2-D (n_samples, dim)")
    if a.shape[1] != b.shape[1]:
        raise ConfigurationError(f"feature dims differ: {a.shape[1]} != {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ConfigurationError("need at least two feature vectors per set")

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))

    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    floor = PSD_TOL * max(1.0, float(np.abs(w).max()))
    if w.min() < floor:
        raise NumericError(f"non-PSD product beyond tolerance: min eigenvalue {w.min():g}")
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())

    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def mse(pairs) -> float:
    """Mean per-pixel squared error over one-to-one image pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ConfigurationError("mse needs at least one pair")
    per_pair = []
    for x, y in pairs:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape != y.shape:
            raise ConfigurationError(f"paired shapes differ: {x.shape} != {y.shape}")
        per_pair.append(float(((x - y) ** 2).mean()))
    return float(np.mean(per_pair))


@dataclass
class EvalReport:
    dataset_id: str
    method_id: str
    fid: float
    mse: float = None      # only defined for one-to-one paired sets
    per_image: list = field(default_factory=list)


def image_features(images, embedder) -> np.ndarray:
    """Embed a list of HxWx3 [0,1] images into feature vectors."""
    import torch

    feats = []
    with torch.no_grad():
        for img in images:
            t = torch.from_numpy(np.asarray(img, dtype=np.float32)
                                 .transpose(2, 0, 1))[None]
            f = embedder(t)
            feats.append(f.reshape(-1).numpy())
    return np.stack(feats)


def toy_embedder(dim=16, seed=0):
    """Deterministic random-projection embedding for desk-scale evaluation."""
    import torch
    from torch import nn

    torch.manual_seed(seed)

    class _Embed(nn.Module):
        def __init__(self):
            super().__init__()
            self.conv = nn.Conv2d(3, dim, 5, stride=4, padding=2)

        def forward(self, x):
            return self.conv(x).mean(dim=(2, 3))

    net = _Embed()
    net.eval()
    net.requires_grad_(False)
    return net


def load_inception_embedder():
    """Standard inception-style embedding (pinned pre-trained release).

    Raises :class:`PerceptualWeightsError` when the weights are unavailable.
    """
    import torch
    from .errors import PerceptualWeightsError

    try:
        from torchvision.models import inception_v3, Inception_V3_Weights

        net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1)
    except Exception as exc:
        raise PerceptualWeightsError(
            "pre-trained inception weights are unavailable in this environment") from exc
    net.fc = torch.nn.Identity()
    net.eval()
    net.requires_grad_(False)

    def embed(x):
        resized = torch.nn.functional.interpolate(x, size=(299, 299), mode="bilinear",
                                                  align_corners=False)
        return net(resized * 2.0 - 1.0)

    return embed


def evaluate_image_sets(real_images, generated_images, embedder, dataset_id="",
                        method_id="", paired=False) -> EvalReport:
    """FID (always) and MSE (for paired, same-length sets) over two image sets."""
    feats_real = image_features(real_images, embedder)
    feats_gen = image_features(generated_images, embedder)
    score = fid(feats_real, feats_gen)
    pair_mse = None
    per_image = []
    if paired:
        if len(real_images) != len(generated_images):
            raise ConfigurationError("paired evaluation needs equal-length sets")
        pairs = list(zip(real_images, generated_images))
        per_image = [{"index": i, "mse": mse([p])} for i, p in enumerate(pairs)]
        pair_mse = mse(pairs)
    return EvalReport(dataset_id=dataset_id, method_id=method_id, fid=score,
                      mse=pair_mse, per_image=per_image)


# ---------------------------------------------------------------------------
# Lesion-count-vs-severity experiment.

def _scaled_set(dset, scale, seed):
    if scale == 1.0:
        return dset
    if scale < 1.0:
        return sample_subset(dset, scale, seed=seed)
    if scale != int(scale):
        raise ConfigurationError(f"multipliers must be integers, got {scale}")
    return multiply(dset, int(scale), seed=seed)


def severity_curve(cases, generator, severity_fn, scales=CURVE_SCALES, seed=0):
    """Generate at each lesion-count scale and score predicted severities.

    ``cases`` is a list of (vessel mask, descriptor set); ``generator`` is a
    generator model/checkpoint or a callable ``(vessels, dset, z) -> image``;
    ``severity_fn`` maps an image to a scalar severity.  Returns
    ``(rows, records)`` where rows hold per-scale box-plot stats and records
    the per-image scores (generation failures are recorded and skipped).
    """
    from .gan import NOISE_DIM, generate, sample_noise

    config = getattr(generator, "config", None)
    noise_dim = config["noise_dim"] if isinstance(config, dict) else \
        getattr(config, "noise_dim", NOISE_DIM)
    if callable(generator) and config is None:
        gen_fn = generator
    else:
        gen_fn = lambda v, d, z: generate(v, d, z, generator)

    rows, records = [], []
    for scale in scales:
        scores = []
        for i, (vessels, dset) in enumerate(cases):
            rec = {"scale": scale, "case": i}
            try:
                scaled = _scaled_set(dset, scale, seed=seed + i)
                z = sample_noise(dim=noise_dim, seed=seed + i)
                image = gen_fn(vessels, scaled, z)
                rec["severity"] = float(severity_fn(image))
                rec["n_descriptors"] = len(scaled)
                scores.append(rec["severity"])
            except Exception as exc:  # keep the sweep alive, record the failure
                rec["error"] = str(exc)
            records.append(rec)
        if scores:
            q1, med, q3 = np.percentile(scores, [25, 50, 75])
            rows.append({"scale": scale, "n": len(scores), "q1": float(q1),
                         "median": float(med), "q3": float(q3),
                         "lo": float(min(scores)), "hi": float(max(scores))})
        else:
            rows.append({"scale": scale, "n": 0, "q1": "", "median": "",
                         "q3": "", "lo": "", "hi": ""})
    return rows, records


def write_curve_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["scale", "n", "q1", "median",
                                                "q3", "lo", "hi"])
        writer.writeheader()
        writer.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# Perceptual-weight ablation sweep.

def ablation_percept(w_values, dataset, gen_config, disc_config, schedule,
                     feature_net, detector, out_dir, sample_case=None):
    """Train one model per perceptual weight and emit a side-by-side gallery.

    Returns per-run rows (weight, final losses, sample path, error).  Runs
    are seeded identically so sweeps are reproducible; failures are isolated
    per run.
    """
    from PIL import Image
    from .gan import GanSchedule, generate, sample_noise, train_gan

    os.makedirs(out_dir, exist_ok=True)
    if sample_case is None:
        sample_case = (dataset[0][1], dataset[0][2])
    vessels, dset = sample_case

    rows = []
    panels = []
    for w_p in w_values:
        run = {"w_p": w_p, "error": ""}
        try:
            sched = replace(schedule, weights=replace(schedule.weights, w_percept=w_p),
                            log_path=os.path.join(out_dir, f"loss_wp{w_p:g}.csv"))
            result = train_gan(dataset, gen_config, disc_config, sched,
                               feature_net, detector)
            g_rows = [r for r in result.log_rows if r["L_G"] != ""]
            run["final_L_G"] = g_rows[-1]["L_G"] if g_rows else ""
            d_rows = [r for r in result.log_rows if r["L_D"] != ""]
            run["final_L_D"] = d_rows[-1]["L_D"] if d_rows else ""
            z = sample_noise(dim=gen_config.noise_dim, seed=schedule.seed)
            image = generate(vessels, dset, z, result.generator)
            path = os.path.join(out_dir, f"sample_wp{w_p:g}.png")
            Image.fromarray((image * 255).astype(np.uint8)).save(path)
            run["sample"] = path
            panels.append(image)
        except Exception as exc:
            run["error"] = str(exc)
            run["final_L_G"] = run["final_L_D"] = run["sample"] = ""
        rows.append(run)

    grid_path = None
    if panels:
        grid = np.concatenate(panels, axis=1)
        grid_path = os.path.join(out_dir, "ablation_grid.png")
        Image.fromarray((grid * 255).astype(np.uint8)).save(grid_path)
    return rows, grid_path
