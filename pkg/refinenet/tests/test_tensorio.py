"""Tensor-container reader/writer: golden bytes, roundtrips, validation."""

import json
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from refinenet.tensorio import MAGIC, read_tensor, write_tensor


def test_golden_bytes_layout(tmp_path):
    arr = np.array([[1.5, -2.0], [0.0, 3.25]], dtype=np.float32)
    path = str(tmp_path / "a.tsr")
    write_tensor(path, arr)
    header = b'{"dtype":"f32","order":"row-major","shape":[2,2]}'
    expected = MAGIC + struct.pack("<I", len(header)) + header + arr.tobytes()
    with open(path, "rb") as fh:
        assert fh.read() == expected


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(
    dtype=np.float32,
    shape=hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
    elements=st.floats(np.float32(-1e18), np.float32(1e18),
                       width=32, allow_nan=False),
))
def test_f32_roundtrip(tmp_path_factory, arr):
    path = str(tmp_path_factory.mktemp("rt") / "t.tsr")
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.dtype == np.float32
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)


def test_i32_roundtrip_extremes(tmp_path):
    arr = np.array([np.iinfo(np.int32).min, -1, 0, np.iinfo(np.int32).max],
                   dtype=np.int32)
    path = str(tmp_path / "i.tsr")
    write_tensor(path, arr, dtype="i32")
    back = read_tensor(path)
    assert back.dtype == np.int32
    assert np.array_equal(back, arr)


def test_reads_producer_written_file(toy_root):
    """Interop: files written by the dataset builder parse unchanged."""
    with open(os.path.join(toy_root, "manifest.json"), encoding="utf-8") as fh:
        entry = json.load(fh)["samples"][0]
    arr = read_tensor(os.path.join(toy_root, entry["files"]["f_gt"]))
    assert arr.dtype == np.float32
    assert arr.shape == (32, 32)
    assert np.isfinite(arr).all()


def test_scalar_write_rejected(tmp_path):
    with pytest.raises(ValueError, match="scalar"):
        write_tensor(str(tmp_path / "s.tsr"), np.float32(1.0))


def test_unknown_dtype_rejected(tmp_path):
    with pytest.raises(ValueError, match="dtype"):
        write_tensor(str(tmp_path / "d.tsr"), np.zeros(3), dtype="f64")


def _write_raw(path, header_obj, payload, magic=MAGIC):
    header = json.dumps(header_obj, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<I", len(header)) + header + payload)


@pytest.mark.parametrize("case, match", [
    ("magic", "bad magic"),
    ("dtype", "dtype"),
    ("order", "order"),
    ("shape", "shape"),
    ("payload", "payload"),
    ("empty-shape", "shape"),
])
def test_malformed_files_rejected(tmp_path, case, match):
    path = str(tmp_path / "bad.tsr")
    good = {"dtype": "f32", "order": "row-major", "shape": [2]}
    payload = np.zeros(2, dtype=np.float32).tobytes()
    if case == "magic":
        _write_raw(path, good, payload, magic=b"NOT-MAGIC")
    elif case == "dtype":
        _write_raw(path, {**good, "dtype": "f16"}, payload)
    elif case == "order":
        _write_raw(path, {**good, "order": "col-major"}, payload)
    elif case == "shape":
        _write_raw(path, {**good, "shape": [2, -1]}, payload)
    elif case == "payload":
        _write_raw(path, good, payload[:-1])
    elif case == "empty-shape":
        _write_raw(path, {**good, "shape": []}, payload)
    with pytest.raises(ValueError, match=match):
        read_tensor(path)


def test_truncated_header_rejected(tmp_path):
    path = str(tmp_path / "t.tsr")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", 100) + b"{}")
    with pytest.raises(ValueError, match="truncated header"):
        read_tensor(path)


def test_no_temp_file_left_behind(tmp_path):
    path = str(tmp_path / "x.tsr")
    write_tensor(path, np.ones(4, dtype=np.float32))
    assert os.listdir(tmp_path) == ["x.tsr"]
