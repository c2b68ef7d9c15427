"""Named-tensor archive and model checkpoint files.

One on-disk format serves checkpoints, activation stacks, and descriptor
crops: a zip archive holding an optional ``meta.json`` plus one standard
``.npy`` entry per tensor under ``tensors/``.  Entry names are the tensor
names; nested names may contain ``/``.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

META_ENTRY = "meta.json"
TENSOR_DIR = "tensors/"


EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed entry timestamp keeps archives byte-stable


def _entry(name):
    info = zipfile.ZipInfo(name, date_time=EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    return info


def save_archive(path, tensors, meta=None):
    """Write ``tensors`` (name -> ndarray) and optional ``meta`` dict to ``path``."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        if meta is not None:
            zf.writestr(_entry(META_ENTRY), json.dumps(meta, indent=2, sort_keys=True))
        for name, arr in tensors.items():
            buf = io.BytesIO()
            np.save(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(_entry(TENSOR_DIR + name + ".npy"), buf.getvalue())


def load_archive(path):
    """Read an archive written by :func:`save_archive`.

    Returns ``(tensors, meta)`` where ``meta`` is ``None`` when absent.
    """
    try:
        with zipfile.ZipFile(path, "r") as zf:
            names = zf.namelist()
            meta = None
            if META_ENTRY in names:
                meta = json.loads(zf.read(META_ENTRY).decode("utf-8"))
            tensors = {}
            for entry in names:
                if entry.startswith(TENSOR_DIR) and entry.endswith(".npy"):
                    key = entry[len(TENSOR_DIR):-len(".npy")]
                    buf = io.BytesIO(zf.read(entry))
                    tensors[key] = np.load(buf, allow_pickle=False)
    except (zipfile.BadZipFile, OSError, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"cannot read archive {path}: {exc}") from exc
    return tensors, meta


@dataclass
class ModelCheckpoint:
    """Serialized parameters plus architecture config for one network.

    ``kind`` identifies the builder ("detector", "generator", "discriminator"),
    ``config`` is the JSON-serializable architecture description, and
    ``tensors`` maps parameter/buffer names to float arrays.
    """

    kind: str
    config: dict
    tensors: dict = field(default_factory=dict)

    def save(self, path):
        meta = {"format": "retinagen-checkpoint", "version": 1,
                "kind": self.kind, "config": self.config}
        save_archive(path, self.tensors, meta)
        return path

    @classmethod
    def load(cls, path):
        tensors, meta = load_archive(path)
        if not meta or meta.get("format") != "retinagen-checkpoint":
            raise CheckpointError(f"{path} is not a model checkpoint archive")
        return cls(kind=meta["kind"], config=meta["config"], tensors=tensors)


def state_dict_to_tensors(state_dict):
    """torch state dict -> plain float32/int64 numpy dict for archiving."""
    out = {}
    for name, value in state_dict.items():
        arr = value.detach().cpu().numpy()
        out[name] = arr.copy()
    return out


def tensors_to_state_dict(tensors):
    """Inverse of :func:`state_dict_to_tensors` (numpy -> torch tensors)."""
    import torch

    return {name: torch.from_numpy(np.asarray(arr)) for name, arr in tensors.items()}
