"""Tensor container, dataset layout and the end-to-end dataset builder.

Container format (little-endian throughout): the 9 magic bytes
``DSCT-TSR1``, a u32 header length, a JSON header
``{"dtype": "f32"|"i32", "shape": [...], "order": "row-major"}`` and the
raw payload of exactly 4 * prod(shape) bytes.

Dataset layout: ``<root>/manifest.json`` plus
``<root>/<split>/<id>/{f_gt,g_gt,f_opmt,g_opmt,p1,p2}.tsr`` for the
splits train/val/test.  The manifest carries no timestamps, so building
the same configuration twice yields bitwise-identical trees.
"""

from __future__ import annotations

import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import opmt as opmt_mod
from .forward import add_poisson_noise, forward_project
from .geometry import (FanBeamGeometry, ImageGrid, fov_radius, geometry_doc,
                       geometry_key, load_or_build)
from .opmt import OpmtConfig
from .phantom import generate_pair
from .spectra import MaterialTable, SpectrumTable, normalize, table_sha256

MAGIC = b"DSCT-TSR1"
DTYPES = {"f32": "<f4", "i32": "<i4"}
SPLITS = ("train", "val", "test")
SAMPLE_FILES = ("f_gt", "g_gt", "f_opmt", "g_opmt", "p1", "p2")
MANIFEST_FORMAT = "dsct-dataset-v1"


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


def atomic_write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def split_counts(count: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Largest-remainder split; remainder ties favor train, then val."""
    total = float(sum(ratios))
    if count < 0 or total <= 0 or any(r < 0 for r in ratios):
        raise ValueError("count and ratios must be non-negative with a positive sum")
    target = [count * r / total for r in ratios]
    base = [math.floor(t) for t in target]
    short = count - sum(base)
    order = sorted(range(3), key=lambda i: (-(target[i] - base[i]), i))
    for i in range(short):
        base[order[i]] += 1
    return tuple(base)


@dataclass(frozen=True)
class DatasetSpec:
    """Everything the builder needs to make a dataset reproducible."""

    count: int
    geom: FanBeamGeometry
    grid: ImageGrid
    spec_low: SpectrumTable
    spec_high: SpectrumTable
    materials: MaterialTable
    i0: float = 1e5
    noise: bool = True
    opmt_config: OpmtConfig = OpmtConfig()
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    master_seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not (self.i0 > 0):
            raise ValueError("i0 must be positive")


def _sample_id(i: int) -> str:
    return f"{i:05d}"


def _assign_splits(spec: DatasetSpec) -> list[str]:
    n_tr, n_va, n_te = split_counts(spec.count, spec.split)
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence([spec.master_seed, 0xD5])))
    perm = rng.permutation(spec.count)
    names = [""] * spec.count
    for pos, idx in enumerate(perm):
        if pos < n_tr:
            names[idx] = "train"
        elif pos < n_tr + n_va:
            names[idx] = "val"
        else:
            names[idx] = "test"
    return names


def build_dataset(out_dir: str, spec: DatasetSpec, cache_dir: str | None = None,
                  threads: int = 1) -> dict:
    """Simulate, reconstruct and write every sample; returns the manifest.

    Per-sample failures are recorded as status "failed" in the manifest
    and re-raised as a single RuntimeError after the build finishes.
    """
    matrix = load_or_build(spec.geom, spec.grid, cache_dir)
    fov = fov_radius(spec.geom)
    s_low = normalize(spec.spec_low)
    s_high = normalize(spec.spec_high)
    splits = _assign_splits(spec)
    os.makedirs(out_dir, exist_ok=True)

    def make_sample(i: int) -> dict:
        sid = _sample_id(i)
        split = splits[i]
        sample_dir = os.path.join(out_dir, split, sid)
        os.makedirs(sample_dir, exist_ok=True)
        pair = generate_pair(spec.grid, fov, [spec.master_seed, i, 0])
        sino = forward_project(pair, matrix, s_low, s_high, spec.materials)
        if spec.noise:
            sino = add_poisson_noise(sino, spec.i0, [spec.master_seed, i, 1])
        state = opmt_mod.run(sino, matrix, (s_low, s_high), spec.materials,
                             spec.opmt_config)
        arrays = {
            "f_gt": pair.f, "g_gt": pair.g,
            "f_opmt": state.f, "g_opmt": state.g,
            "p1": sino.p1, "p2": sino.p2,
        }
        files = {}
        for name in SAMPLE_FILES:
            rel = f"{split}/{sid}/{name}.tsr"
            write_tensor(os.path.join(out_dir, rel), arrays[name], dtype="f32")
            files[name] = rel
        return {"id": sid, "split": split, "seed": [spec.master_seed, i],
                "status": "ok", "files": files}

    entries: list[dict] = [None] * spec.count  # type: ignore[list-item]
    errors = []

    def run_one(i: int):
        try:
            entries[i] = make_sample(i)
        except Exception as exc:  # noqa: BLE001 - recorded, then re-raised
            entries[i] = {"id": _sample_id(i), "split": splits[i],
                          "seed": [spec.master_seed, i],
                          "status": "failed", "error": str(exc)}
            errors.append((i, exc))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_one, range(spec.count)))
    else:
        for i in range(spec.count):
            run_one(i)

    norm = {"f": 0.0, "g": 0.0}
    for entry in entries:
        if entry["status"] != "ok" or entry["split"] != "train":
            continue
        for ch in ("f", "g"):
            arr = read_tensor(os.path.join(out_dir, entry["files"][f"{ch}_gt"]))
            norm[ch] = max(norm[ch], float(arr.max()))

    n_tr, n_va, n_te = split_counts(spec.count, spec.split)
    manifest = {
        "format": MANIFEST_FORMAT,
        "count": spec.count,
        "splits": {"train": n_tr, "val": n_va, "test": n_te},
        "master_seed": spec.master_seed,
        "normalization": norm,
        "geometry": geometry_doc(spec.geom, spec.grid),
        "geometry_key": geometry_key(spec.geom, spec.grid),
        "spectra": {
            "low": {"label": s_low.label, "sha256": table_sha256(s_low)},
            "high": {"label": s_high.label, "sha256": table_sha256(s_high)},
            "materials": {"sha256": table_sha256(spec.materials)},
        },
        "i0": spec.i0,
        "noise": spec.noise,
        "opmt": json.loads(spec.opmt_config.to_json()),
        "samples": entries,
    }
    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    if errors:
        raise RuntimeError(
            f"{len(errors)} of {spec.count} samples failed; "
            f"first: sample {errors[0][0]}: {errors[0][1]}"
        )
    return manifest


def read_manifest(root: str) -> dict:
    path = os.path.join(root, "manifest.json")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: unknown manifest format {doc.get('format')!r}")
    return doc


def load_sample(root: str, entry: dict) -> dict[str, np.ndarray]:
    """All six tensors of one manifest sample entry, keyed by role."""
    if entry.get("status") != "ok":
        raise ValueError(f"sample {entry.get('id')} is incomplete")
    return {name: read_tensor(os.path.join(root, rel))
            for name, rel in entry["files"].items()}
