"""Reader/writer for the dataset tensor container.

The container is little-endian throughout: 9 magic bytes ``DSCT-TSR1``,
a u32 header length, a JSON header ``{"dtype": "f32"|"i32", "shape":
[...], "order": "row-major"}`` and the raw payload of exactly
4 * prod(shape) bytes.  This module is self-contained so the refiner
only depends on the on-disk format, not on the producer's code.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"DSCT-TSR1"
DTYPES = {"f32": "<f4", "i32": "<i4"}


def write_tensor(path: str, array: np.ndarray, dtype: str = "f32") -> None:
    """Atomically write one tensor in the container format."""
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype '{dtype}'")
    if np.ndim(array) == 0:
        raise ValueError("scalar tensors are not supported")
    arr = np.ascontiguousarray(np.asarray(array).astype(DTYPES[dtype], copy=False))
    header = json.dumps(
        {"dtype": dtype, "shape": list(arr.shape), "order": "row-major"},
        sort_keys=True, separators=(",", ":"),
    ).encode("ascii")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_tensor(path: str) -> np.ndarray:
    """Read one tensor; validates magic, header and payload size."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: bad magic, not a tensor file")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    off = len(MAGIC) + 4
    if len(blob) < off + hlen:
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off:off + hlen])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: bad header JSON: {exc}") from None
    dtype = header.get("dtype")
    shape = header.get("shape")
    if dtype not in DTYPES:
        raise ValueError(f"{path}: unsupported dtype '{dtype}'")
    if header.get("order") != "row-major":
        raise ValueError(f"{path}: unsupported order '{header.get('order')}'")
    if (not isinstance(shape, list) or not shape
            or any(not isinstance(s, int) or s < 0 for s in shape)):
        raise ValueError(f"{path}: bad shape {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    payload = blob[off + hlen:]
    if len(payload) != 4 * count:
        raise ValueError(
            f"{path}: truncated payload, expected {4 * count} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=DTYPES[dtype]).reshape(shape).copy()
