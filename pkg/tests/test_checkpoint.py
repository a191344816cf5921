import json

import numpy as np
import pytest

from oat import checkpoint
from oat.checkpoint import CheckpointError


def test_round_trip_preserves_names_dtypes_shapes(tmp_path):
    arrays = {
        "enc.0.w": np.arange(6, dtype=np.float32).reshape(2, 3),
        "bos": np.array([1.5, -2.0]),
        "ids": np.array([[1, 2]], dtype=np.int64),
        "scalar": np.float64(3.0) * np.ones(()),
    }
    checkpoint.save(tmp_path / "a.ckpt", arrays, {"seed": 4})
    back, meta = checkpoint.load(tmp_path / "a.ckpt")
    assert list(back) == list(arrays) and meta == {"seed": 4}
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and back[k].shape == arrays[k].shape
        np.testing.assert_array_equal(back[k], arrays[k])


def test_manifest_is_readable_text(tmp_path):
    checkpoint.save(tmp_path / "a.ckpt", {"x": np.zeros(3, np.float32)})
    head = (tmp_path / "a.ckpt").read_bytes().split(b"\n", 1)[0]
    doc = json.loads(head)
    assert doc["format"] == "oat-ckpt-v1"
    assert doc["tensors"][0] == {"name": "x", "dtype": "float32", "shape": [3], "offset": 0, "nbytes": 12}


def test_encoding_is_deterministic_and_little_endian():
    a = checkpoint.encode({"x": np.array([1.0], dtype=">f8")})
    b = checkpoint.encode({"x": np.array([1.0], dtype="<f8")})
    assert a == b
    assert a.endswith(np.array([1.0], dtype="<f8").tobytes())


def test_corrupt_inputs_rejected(tmp_path):
    good = checkpoint.encode({"x": np.zeros(4)})
    with pytest.raises(CheckpointError, match="past end"):
        checkpoint.decode(good[:-8])
    with pytest.raises(CheckpointError, match="terminator"):
        checkpoint.decode(b"no newline")
    with pytest.raises(CheckpointError, match="oat-pe-v1"):
        checkpoint.decode(good, tag="oat-pe-v1")
    with pytest.raises(CheckpointError, match="dtype"):
        checkpoint.encode({"c": np.zeros(2, dtype=np.complex64)})


def test_atomic_write_leaves_no_temp_files(tmp_path):
    checkpoint.atomic_write_text(tmp_path / "sub" / "f.txt", "hello")
    assert (tmp_path / "sub" / "f.txt").read_text() == "hello"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]
