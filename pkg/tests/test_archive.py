import numpy as np
import pytest

from retinagen.archive import (ModelCheckpoint, load_archive, save_archive,
                               state_dict_to_tensors)
from retinagen.errors import CheckpointError


def test_roundtrip_tensors_and_meta(tmp_path):
    path = tmp_path / "stack.zip"
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3),
               "nested/b": np.ones((1, 4), dtype=np.float64)}
    save_archive(path, tensors, meta={"kind": "test", "n": 2})
    loaded, meta = load_archive(path)
    assert meta == {"kind": "test", "n": 2}
    assert set(loaded) == {"a", "nested/b"}
    np.testing.assert_array_equal(loaded["a"], tensors["a"])
    assert loaded["nested/b"].dtype == np.float64


def test_archive_without_meta(tmp_path):
    path = tmp_path / "plain.zip"
    save_archive(path, {"x": np.zeros(3)})
    tensors, meta = load_archive(path)
    assert meta is None
    assert tensors["x"].shape == (3,)


def test_checkpoint_roundtrip(tmp_path, toy_detector):
    ckpt = ModelCheckpoint(kind="detector", config=toy_detector.config.to_dict(),
                           tensors=state_dict_to_tensors(toy_detector.state_dict()))
    path = tmp_path / "det.ckpt"
    ckpt.save(path)
    back = ModelCheckpoint.load(path)
    assert back.kind == "detector"
    assert back.config == ckpt.config
    for name, arr in ckpt.tensors.items():
        np.testing.assert_array_equal(back.tensors[name], arr)


def test_corrupt_archive_raises(tmp_path):
    path = tmp_path / "broken.zip"
    path.write_bytes(b"not a zip at all")
    with pytest.raises(CheckpointError):
        load_archive(path)


def test_non_checkpoint_archive_rejected(tmp_path):
    path = tmp_path / "stack.zip"
    save_archive(path, {"x": np.zeros(2)}, meta={"format": "other"})
    with pytest.raises(CheckpointError):
        ModelCheckpoint.load(path)
