"""Lesion descriptors: locate lesions on the image-space activation map,
crop per-layer activation patterns into descriptors, rebuild activation maps
from descriptor sets, and manipulate sets (relocate, clone, remove, subset,
multiply).

All operations are pure: descriptor sets are immutable and manipulations
return new sets.  Crop arrays are shared between sets and never mutated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .activation import ActivationStack
from .archive import save_archive, load_archive
from .errors import ConfigurationError, DegenerateInput, NumericError

BLUR_SIGMA = 10.0
BLUR_TRUNCATE = 4.0
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LesionBox:
    """Axis-aligned lesion bounds in image-space pixels."""

    left: int
    top: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"box needs positive extent, got {self}")
        if self.left < 0 or self.top < 0:
            raise ConfigurationError(f"box origin out of bounds: {self}")

    def check_bounds(self, image_size):
        if self.left + self.width > image_size or self.top + self.height > image_size:
            raise ConfigurationError(f"box {self} exceeds image size {image_size}")
        return self

    def scaled(self, stride):
        """Outward-rounded box at a coarser layer grid (origin floors, extent ceils)."""
        l0 = self.left // stride
        t0 = self.top // stride
        r1 = math.ceil((self.left + self.width) / stride)
        b1 = math.ceil((self.top + self.height) / stride)
        return t0, b1, l0, r1


def otsu_split(counts) -> int:
    """Index k maximizing between-class variance for classes bins<=k vs >k.

    Exact integer arithmetic over the histogram, ties broken toward the
    lowest split.  Bin values are their indices.
    """
    counts = [int(c) for c in np.asarray(counts).ravel()]
    n_bins = len(counts)
    total = sum(counts)
    if n_bins < 2 or total == 0:
        raise DegenerateInput("histogram needs at least two bins with mass")
    total_sum = sum(i * c for i, c in enumerate(counts))

    best_k, best_num2, best_den = -1, -1, 1
    w0 = 0
    s0 = 0
    for k in range(n_bins - 1):
        w0 += counts[k]
        s0 += k * counts[k]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        s1 = total_sum - s0
        num = s0 * w1 - s1 * w0
        num2 = num * num
        den = w0 * w1
        # compare num2/den > best_num2/best_den exactly via cross products
        if num2 * best_den > best_num2 * den:
            best_k, best_num2, best_den = k, num2, den
    if best_k < 0:
        raise DegenerateInput("histogram mass is concentrated in a single bin")
    return best_k


def otsu_threshold(values, bins=256) -> float:
    """Histogram Otsu threshold over a scalar map.

    Returns the lower edge of the first above-threshold bin, so the induced
    classes are ``values < t`` / ``values >= t``.  Raises
    :class:`DegenerateInput` on constant maps.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    vmin, vmax = float(arr.min()), float(arr.max())
    if vmin == vmax:
        raise DegenerateInput("constant-valued map has no threshold")
    counts, edges = np.histogram(arr, bins=bins, range=(vmin, vmax))
    k = otsu_split(counts)
    return float(edges[k + 1])


def locate_lesions(a0, sigma=BLUR_SIGMA, truncate=BLUR_TRUNCATE):
    """Blur the image-space activation map, threshold it, and box the blobs.

    Gaussian blur (reflective border), Otsu threshold on the blurred values,
    8-connected components, one minimal bounding box per component.  Boxes
    come back sorted by (top, left).  A constant map yields no lesions.
    """
    arr = np.asarray(a0, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigurationError(f"expected a 2-D scalar map, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError("activation map contains non-finite values")
    if (arr < 0).any():
        raise ConfigurationError("activation map must be non-negative")

    blurred = ndimage.gaussian_filter(arr, sigma=sigma, mode="reflect", truncate=truncate)
    try:
        thresh = otsu_threshold(blurred)
    except DegenerateInput:
        return []
    mask = blurred >= thresh
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    boxes = []
    for sl in ndimage.find_objects(labels):
        if sl is None:
            continue
        rows, cols = sl
        boxes.append(LesionBox(left=int(cols.start), top=int(rows.start),
                               width=int(cols.stop - cols.start),
                               height=int(rows.stop - rows.start)))
    boxes.sort(key=lambda b: (b.top, b.left))
    return boxes


@dataclass(frozen=True)
class PathologicalDescriptor:
    """One lesion: its box plus boxed activation crops per tap level.

    ``crop_refs`` names each crop inside the set's tensor archive.  Refs are
    assigned once at extraction and travel with the descriptor through every
    manipulation, so clones share their source's tensors.
    """

    id: int
    box: LesionBox
    crops: dict              # tap level -> (C, h, w) non-negative array
    crop_refs: dict = None   # tap level -> archive entry name

    def moved(self, left, top):
        return replace(self, box=replace(self.box, left=int(left), top=int(top)))

    def refs(self):
        return self.crop_refs or {level: f"d{self.id}/A{level}" for level in self.crops}


@dataclass(frozen=True)
class DescriptorSet:
    """Ordered descriptors for one image; the manipulable pathology payload."""

    descriptors: tuple
    image_size: int
    image_id: str = ""
    warnings: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "descriptors", tuple(self.descriptors))
        object.__setattr__(self, "warnings", tuple(self.warnings))
        ids = [d.id for d in self.descriptors]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"descriptor ids are not unique: {ids}")

    def __len__(self):
        return len(self.descriptors)

    def ids(self):
        return [d.id for d in self.descriptors]

    def get(self, desc_id):
        for d in self.descriptors:
            if d.id == desc_id:
                return d
        raise KeyError(f"no descriptor with id {desc_id}")

    def next_id(self):
        return max((d.id for d in self.descriptors), default=-1) + 1


def extract_descriptors(stack: ActivationStack, boxes, image_id="") -> DescriptorSet:
    """Crop the tap projections inside each lesion box into descriptors.

    Box coordinates scale to each tap's grid with outward rounding; crops
    that would overrun a map are clamped and the clamp recorded as a warning.
    Descriptor order follows box order.
    """
    levels = sorted(level for level in stack.taps if level >= 1)
    image_size = stack.tap(0).shape[-1]
    warnings = []
    descriptors = []
    for i, box in enumerate(boxes):
        box.check_bounds(image_size)
        crops = {}
        for level in levels:
            amap = stack.tap(level)
            stride = stack.tap_strides[level]
            t0, b1, l0, r1 = box.scaled(stride)
            h, w = amap.shape[-2:]
            ct0, cb1 = max(t0, 0), min(b1, h)
            cl0, cr1 = max(l0, 0), min(r1, w)
            if (ct0, cb1, cl0, cr1) != (t0, b1, l0, r1):
                warnings.append(f"descriptor {i}: crop clamped to map bounds at level {level}")
            crops[level] = np.ascontiguousarray(amap[:, ct0:cb1, cl0:cr1])
        refs = {level: f"d{i}/A{level}" for level in crops}
        descriptors.append(PathologicalDescriptor(id=i, box=box, crops=crops,
                                                  crop_refs=refs))
    return DescriptorSet(descriptors=descriptors, image_size=image_size,
                         image_id=image_id, warnings=warnings)


def reconstruct_projections(dset: DescriptorSet, target_shapes, strides=None) -> ActivationStack:
    """Rebuild tap activation maps by inserting each descriptor's crops.

    ``target_shapes`` maps tap level -> (C, h, w).  Maps start at zero and
    crops add in place, so overlapping descriptors superpose additively.
    """
    strides = strides or {level: 2 ** level for level in target_shapes}
    maps = {level: np.zeros(shape, dtype=np.float32) for level, shape in target_shapes.items()}
    for d in dset.descriptors:
        for level, amap in maps.items():
            crop = d.crops.get(level)
            if crop is None:
                continue
            t0, b1, l0, r1 = d.box.scaled(strides[level])
            ch, cw = crop.shape[-2:]
            if ch > b1 - t0 or cw > r1 - l0:
                raise ConfigurationError(
                    f"descriptor {d.id}: crop {crop.shape} larger than its box "
                    f"({b1 - t0}x{r1 - l0}) at level {level}")
            if crop.shape[0] != amap.shape[0]:
                raise ConfigurationError(
                    f"descriptor {d.id}: crop channels {crop.shape[0]} != map {amap.shape[0]}")
            h, w = amap.shape[-2:]
            eh, ew = min(t0 + ch, h) - t0, min(l0 + cw, w) - l0
            if eh <= 0 or ew <= 0:
                continue
            amap[:, t0:t0 + eh, l0:l0 + ew] += crop[:, :eh, :ew]
    projections = {f"A{level}": maps[level] for level in maps}
    return ActivationStack(projections=projections,
                           taps={level: f"A{level}" for level in maps},
                           tap_strides=dict(strides))


def relocate(dset: DescriptorSet, desc_id, new_left, new_top) -> DescriptorSet:
    """Move one descriptor's box origin; crops stay untouched."""
    d = dset.get(desc_id)
    moved = d.moved(new_left, new_top)
    moved.box.check_bounds(dset.image_size)
    return replace(dset, descriptors=tuple(moved if x.id == desc_id else x
                                           for x in dset.descriptors))


def clone_remove(dset: DescriptorSet, ops) -> DescriptorSet:
    """Apply a sequence of ``("clone", id, left, top)`` / ``("remove", id)`` edits.

    Clones get fresh ids; removal drops the descriptor.
    """
    current = list(dset.descriptors)
    next_id = dset.next_id()
    for op in ops:
        if op[0] == "remove":
            _, desc_id = op
            before = len(current)
            current = [d for d in current if d.id != desc_id]
            if len(current) == before:
                raise KeyError(f"no descriptor with id {desc_id}")
        elif op[0] == "clone":
            _, desc_id, left, top = op
            source = next((d for d in current if d.id == desc_id), None)
            if source is None:
                raise KeyError(f"no descriptor with id {desc_id}")
            clone = replace(source.moved(left, top), id=next_id)
            clone.box.check_bounds(dset.image_size)
            next_id += 1
            current.append(clone)
        else:
            raise ConfigurationError(f"unknown descriptor edit {op!r}")
    return replace(dset, descriptors=tuple(current))


def sample_subset(dset: DescriptorSet, keep_fraction, seed=0) -> DescriptorSet:
    """Keep round(keep_fraction * n) descriptors chosen uniformly at random."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ConfigurationError(f"keep_fraction must be in [0, 1], got {keep_fraction}")
    n = len(dset)
    n_keep = int(math.floor(keep_fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    kept = sorted(rng.choice(n, size=n_keep, replace=False).tolist()) if n else []
    return replace(dset, descriptors=tuple(dset.descriptors[i] for i in kept))


def multiply(dset: DescriptorSet, factor, seed=0, fov_mask=None,
             min_inside=0.9, max_tries=200) -> DescriptorSet:
    """Clone every descriptor (factor - 1) times at random in-bounds positions.

    Positions are rejection-sampled until at least ``min_inside`` of the box
    area lies inside the field-of-view mask (when one is given).
    """
    if int(factor) != factor or factor < 1:
        raise ConfigurationError(f"factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    rng = np.random.default_rng(seed)
    size = dset.image_size
    current = list(dset.descriptors)
    next_id = dset.next_id()
    for d in dset.descriptors:
        w, h = d.box.width, d.box.height
        if w > size or h > size:
            raise ConfigurationError(f"descriptor {d.id} larger than the image")
        for _ in range(factor - 1):
            for _ in range(max_tries):
                left = int(rng.integers(0, size - w + 1))
                top = int(rng.integers(0, size - h + 1))
                if fov_mask is None:
                    break
                inside = fov_mask[top:top + h, left:left + w].mean()
                if inside >= min_inside:
                    break
            else:
                raise RuntimeError(
                    f"could not place a clone of descriptor {d.id} inside the "
                    f"field of view after {max_tries} tries")
            current.append(replace(d.moved(left, top), id=next_id))
            next_id += 1
    return replace(dset, descriptors=tuple(current))


# ---------------------------------------------------------------------------
# Serialization: JSON geometry + sibling named-tensor archive for the crops.

def descriptor_set_to_json(dset: DescriptorSet, tensor_archive=None):
    """Split a set into its JSON document and its crop-tensor dict.

    The JSON's ``crops`` values are entry names inside the sibling archive.
    """
    doc = {
        "schema_version": SCHEMA_VERSION,
        "image_id": dset.image_id,
        "image_size": dset.image_size,
        "tensor_archive": tensor_archive,
        "descriptors": [],
    }
    tensors = {}
    for d in dset.descriptors:
        refs = d.refs()
        for level, crop in sorted(d.crops.items()):
            tensors.setdefault(refs[level], crop)
        doc["descriptors"].append({
            "id": d.id,
            "left": d.box.left, "top": d.box.top,
            "width": d.box.width, "height": d.box.height,
            "crops": {f"A{level}": refs[level] for level in sorted(d.crops)},
        })
    return doc, tensors


def descriptor_set_from_json(doc, tensors) -> DescriptorSet:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported descriptor schema {doc.get('schema_version')!r}")
    descriptors = []
    for entry in doc["descriptors"]:
        crops = {}
        refs = {}
        for key, ref in entry.get("crops", {}).items():
            level = int(key[1:])
            crops[level] = np.asarray(tensors[ref], dtype=np.float32)
            refs[level] = ref
        box = LesionBox(left=entry["left"], top=entry["top"],
                        width=entry["width"], height=entry["height"])
        descriptors.append(PathologicalDescriptor(id=entry["id"], box=box,
                                                  crops=crops, crop_refs=refs))
    return DescriptorSet(descriptors=descriptors, image_size=doc["image_size"],
                         image_id=doc.get("image_id", ""))


def save_descriptor_set(dset: DescriptorSet, json_path):
    """Write ``<name>.json`` plus the sibling ``<name>.tensors.zip`` archive."""
    json_path = str(json_path)
    stem = json_path[:-5] if json_path.endswith(".json") else json_path
    archive_path = stem + ".tensors.zip"
    import os

    doc, tensors = descriptor_set_to_json(dset, tensor_archive=os.path.basename(archive_path))
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_archive(archive_path, tensors, meta={"format": "retinagen-descriptor-crops",
                                              "version": SCHEMA_VERSION})
    return json_path, archive_path


def load_descriptor_set(json_path) -> DescriptorSet:
    import os

    with open(json_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    tensors = {}
    if doc.get("tensor_archive") and doc["descriptors"]:
        archive_path = os.path.join(os.path.dirname(os.path.abspath(json_path)),
                                    doc["tensor_archive"])
        tensors, _ = load_archive(archive_path)
    return descriptor_set_from_json(doc, tensors)
