"""Dataset manifests, image ingestion, and field-of-view handling.

Ingestion resizes every image to the working resolution, computes its
circular field-of-view mask (luminance threshold, largest component, hole
fill), and stores the results under content checksums so re-runs are no-ops
for unchanged inputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError


def load_image(path):
    """RGB image file -> HxWx3 float array in [0,1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(path, arr):
    arr = np.clip(np.asarray(arr), 0.0, 1.0)
    Image.fromarray((arr * 255).round().astype(np.uint8)).save(path)
    return path


def load_mask(path):
    """Binary mask PNG ({0,255} or {0,1}) -> HxW float array of {0,1}."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.float32) if arr.max() > 1 else arr.astype(np.float32)


def save_mask(path, mask):
    Image.fromarray((np.asarray(mask) > 0.5).astype(np.uint8) * 255).save(path)
    return path


@dataclass
class ManifestEntry:
    image_id: str
    path: str
    vessel_mask: str = None
    grade: int = None
    split: str = "train"


@dataclass
class DatasetManifest:
    """Images, optional vessel masks and grades, and the train/test split."""

    dataset_id: str
    entries: list = field(default_factory=list)

    def __post_init__(self):
        self.entries = [e if isinstance(e, ManifestEntry) else ManifestEntry(**e)
                        for e in self.entries]

    def validate(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate image ids in manifest")
        for e in self.entries:
            if not os.path.exists(e.path):
                raise ConfigurationError(f"missing image file: {e.path}")
            if e.vessel_mask and not os.path.exists(e.vessel_mask):
                raise ConfigurationError(f"missing vessel mask: {e.vessel_mask}")
            if e.split not in ("train", "test"):
                raise ConfigurationError(f"bad split {e.split!r} for {e.image_id}")
        return self

    def split(self, which):
        return [e for e in self.entries if e.split == which]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"dataset_id": self.dataset_id,
                       "entries": [asdict(e) for e in self.entries]}, fh, indent=2)
        return path

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(**doc)

    @classmethod
    def from_directory(cls, image_dir, dataset_id="custom", labels_csv=None,
                       mask_dir=None, test_fraction=0.0):
        """Build a manifest from an image directory plus an optional
        (image_id, grade) label table."""
        grades = {}
        if labels_csv:
            with open(labels_csv, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    grades[row["image_id"]] = int(row["grade"])
        entries = []
        names = sorted(f for f in os.listdir(image_dir)
                       if f.lower().endswith((".png", ".jpg", ".jpeg", ".tif", ".tiff")))
        n_test = int(round(test_fraction * len(names)))
        for i, name in enumerate(names):
            image_id = os.path.splitext(name)[0]
            mask = None
            if mask_dir:
                candidate = os.path.join(mask_dir, image_id + ".png")
                mask = candidate if os.path.exists(candidate) else None
            entries.append(ManifestEntry(
                image_id=image_id, path=os.path.join(image_dir, name),
                vessel_mask=mask, grade=grades.get(image_id),
                split="test" if i >= len(names) - n_test else "train"))
        return cls(dataset_id=dataset_id, entries=entries)


@dataclass
class PreprocessSpec:
    target_size: int = 512
    fov_threshold: float = 0.03     # luminance floor separating retina from black border
    value_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.target_size <= 0 or self.target_size % 64 != 0:
            raise ConfigurationError(
                f"target size must be a positive multiple of 64, got {self.target_size}")


def fov_mask(image, threshold=0.03):
    """Field-of-view mask: luminance threshold, largest component, filled holes."""
    lum = np.asarray(image).mean(axis=2)
    raw = lum > threshold
    if not raw.any():
        warnings.warn("image is entirely below the field-of-view threshold")
        return np.zeros_like(raw)
    labels, n = ndimage.label(raw)
    largest = np.argmax(ndimage.sum_labels(raw, labels, index=range(1, n + 1))) + 1
    return ndimage.binary_fill_holes(labels == largest)


def crop_to_fov(image, reference_mask):
    """Zero out pixels outside the reference field of view."""
    image = np.asarray(image)
    mask = np.asarray(reference_mask)
    if image.shape[:2] != mask.shape:
        raise ConfigurationError(
            f"image {image.shape} and mask {mask.shape} sizes differ")
    scaled = mask.astype(image.dtype)
    return image * (scaled[:, :, None] if image.ndim == 3 else scaled)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ingest(manifest: DatasetManifest, spec: PreprocessSpec, out_dir):
    """Normalize a dataset into an on-disk store.

    Per image: resized PNG, field-of-view mask PNG, optionally the resized
    vessel mask, all recorded in ``index.json`` under the source checksum.
    Unchanged sources are skipped on re-runs.
    """
    manifest.validate()
    os.makedirs(out_dir, exist_ok=True)
    index_path = os.path.join(out_dir, "index.json")
    index = {}
    if os.path.exists(index_path):
        with open(index_path, "r", encoding="utf-8") as fh:
            index = json.load(fh)

    records = []
    for e in manifest.entries:
        checksum = _sha256(e.path)
        prior = index.get(e.image_id)
        if prior and prior["checksum"] == checksum and all(
                os.path.exists(os.path.join(out_dir, f)) for f in prior["files"].values()):
            records.append({"image_id": e.image_id, "skipped": True, **prior})
            continue

        with Image.open(e.path) as im:
            resized = im.convert("RGB").resize((spec.target_size, spec.target_size),
                                               Image.BILINEAR)
        arr = np.asarray(resized, dtype=np.float32) / 255.0
        lo, hi = spec.value_range
        arr = lo + arr * (hi - lo)
        mask = fov_mask(arr, spec.fov_threshold)

        files = {"image": f"{e.image_id}.png", "fov": f"{e.image_id}.fov.png"}
        save_image(os.path.join(out_dir, files["image"]), arr)
        save_mask(os.path.join(out_dir, files["fov"]), mask)
        if e.vessel_mask:
            with Image.open(e.vessel_mask) as vm:
                vesselr = vm.convert("L").resize((spec.target_size, spec.target_size),
                                                 Image.NEAREST)
            files["vessels"] = f"{e.image_id}.vessels.png"
            save_mask(os.path.join(out_dir, files["vessels"]),
                      np.asarray(vesselr) > 127)

        entry = {"checksum": checksum, "files": files, "grade": e.grade,
                 "split": e.split, "fov_empty": bool(~mask.any())}
        index[e.image_id] = entry
        records.append({"image_id": e.image_id, "skipped": False, **entry})

    with open(index_path, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    return records
