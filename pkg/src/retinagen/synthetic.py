"""Procedural retina-like fixtures: circular field of view, branching vessel
trees, and dot/blob lesions.  Desk-scale stand-ins for real fundus data in
demos, smoke training, and tests.
"""

from __future__ import annotations

import numpy as np

from .descriptors import DescriptorSet, LesionBox, PathologicalDescriptor


def disk_mask(size, radius_frac=0.48):
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    return ((yy - c) ** 2 + (xx - c) ** 2) <= (radius_frac * size) ** 2


def gaussian_blob(size, cy, cx, sigma, amplitude=1.0):
    yy, xx = np.mgrid[0:size, 0:size]
    return amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))


def synth_vessel_mask(size=64, seed=0, n_branches=6):
    """Binary vessel tree grown by biased random walks from the disc center."""
    rng = np.random.default_rng(seed)
    mask = np.zeros((size, size), dtype=bool)
    fov = disk_mask(size)
    cy, cx = size * 0.5, size * 0.35
    for _ in range(n_branches):
        y, x = cy + rng.normal(0, 2), cx + rng.normal(0, 2)
        angle = rng.uniform(0, 2 * np.pi)
        for _ in range(int(size * 1.5)):
            angle += rng.normal(0, 0.25)
            y += np.sin(angle)
            x += np.cos(angle)
            iy, ix = int(round(y)), int(round(x))
            if not (0 <= iy < size and 0 <= ix < size) or not fov[iy, ix]:
                break
            mask[max(iy - 1, 0):iy + 1, max(ix - 1, 0):ix + 1] = True
            if rng.random() < 0.02:
                angle += rng.choice([-1.0, 1.0]) * 0.8
    return mask & fov


def synth_fundus(size=64, seed=0, n_lesions=3, vessel_mask=None):
    """Toy fundus image in [0,1] with its FOV mask and lesion centers.

    Returns ``(image HxWx3, fov HxW bool, centers list[(y, x)])``.  Lesions
    alternate dark dots (bleeds) and bright blobs (exudates).
    """
    rng = np.random.default_rng(seed)
    fov = disk_mask(size)
    if vessel_mask is None:
        vessel_mask = synth_vessel_mask(size, seed=seed)

    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    radial = np.sqrt((yy - c) ** 2 + (xx - c) ** 2) / (0.5 * size)
    base = np.stack([
        0.85 - 0.25 * radial,
        0.45 - 0.15 * radial,
        0.25 - 0.10 * radial,
    ], axis=-1)
    base += rng.normal(0, 0.01, base.shape)

    disc = gaussian_blob(size, size * 0.5, size * 0.30, size * 0.05)
    base += disc[:, :, None] * np.array([0.15, 0.3, 0.3])
    base[vessel_mask] = base[vessel_mask] * 0.45

    centers = []
    margin = int(size * 0.18)
    for i in range(n_lesions):
        for _ in range(50):
            ly = int(rng.integers(margin, size - margin))
            lx = int(rng.integers(margin, size - margin))
            if fov[ly, lx]:
                break
        centers.append((ly, lx))
        sigma = size * rng.uniform(0.015, 0.03)
        blob = gaussian_blob(size, ly, lx, sigma)
        if i % 2 == 0:  # dark bleed
            base -= blob[:, :, None] * np.array([0.5, 0.35, 0.2])
        else:           # bright exudate
            base += blob[:, :, None] * np.array([0.15, 0.5, 0.5])

    base[~fov] = 0.0
    return np.clip(base, 0.0, 1.0).astype(np.float32), fov, centers


def synth_grade_dataset(n=20, size=64, seed=0, max_lesions=8):
    """(image, grade) pairs where the grade tracks the lesion count."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        n_lesions = int(rng.integers(0, max_lesions + 1))
        img, _, _ = synth_fundus(size, seed=seed + 1000 + i, n_lesions=n_lesions)
        grade = min(4, n_lesions // 2)
        pairs.append((img, grade))
    return pairs


def synth_descriptor_set(image_size, centers, channels=(8, 16), box=8, seed=0,
                         image_id="synthetic"):
    """Descriptor set with Gaussian-bump crops centered on each lesion."""
    rng = np.random.default_rng(seed)
    descriptors = []
    for i, (cy, cx) in enumerate(centers):
        left = int(np.clip(cx - box // 2, 0, image_size - box))
        top = int(np.clip(cy - box // 2, 0, image_size - box))
        crops = {}
        for level, ch in enumerate(channels, start=1):
            stride = 2 ** level
            side = box // stride
            bump = gaussian_blob(side, (side - 1) / 2, (side - 1) / 2, side / 3.0)
            gains = rng.uniform(0.2, 1.0, size=(ch, 1, 1)).astype(np.float32)
            crops[level] = (gains * bump[None]).astype(np.float32)
        descriptors.append(PathologicalDescriptor(
            id=i, box=LesionBox(left=left, top=top, width=box, height=box),
            crops=crops, crop_refs={level: f"d{i}/A{level}" for level in crops}))
    return DescriptorSet(descriptors=descriptors, image_size=image_size, image_id=image_id)


def synth_gan_dataset(n=10, size=64, seed=0, channels=(8, 16)):
    """(image, vessel mask, descriptor set) triples for smoke training."""
    triples = []
    for i in range(n):
        vessels = synth_vessel_mask(size, seed=seed + i)
        img, _, centers = synth_fundus(size, seed=seed + i, n_lesions=2 + i % 3,
                                       vessel_mask=vessels)
        dset = synth_descriptor_set(size, centers, channels=channels, seed=seed + i,
                                    image_id=f"synthetic-{i}")
        triples.append((img, vessels.astype(np.float32), dset))
    return triples
