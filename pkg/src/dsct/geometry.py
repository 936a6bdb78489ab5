"""Fan-beam acquisition geometry and the sparse ray/pixel system matrix.

The scanner rotates a point source and a flat detector around the origin.
At rotation angle ``beta`` the source sits at ``(-d1*cos(beta), -d1*sin(beta))``
and the detector line passes through ``(d2*cos(beta), d2*sin(beta))``,
perpendicular to the source-origin axis.  Ray ``l = i_angle * n_d + i_det``
connects the source to the center of detector element ``i_det``.

Intersection lengths with a centered square pixel grid are computed exactly
by walking the parametric ray between successive gridline crossings.  Each
cell is identified from the midpoint of its sub-segment, so points that land
exactly on a gridline resolve toward +x/+y (half-open pixels).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.sparse import csr_matrix

GEOMETRY_JSON_KEYS = ("n_s", "n_d", "l_d", "d1", "d2", "n_r")


@dataclass(frozen=True)
class FanBeamGeometry:
    """Rotation count, detector layout and source/detector distances."""

    n_s: int = 60
    n_d: int = 256
    l_d: float = 0.2
    d1: float = 490.0
    d2: float = 390.0
    angles: np.ndarray | None = None

    def __post_init__(self):
        if self.n_s < 1 or self.n_d < 1:
            raise ValueError("n_s and n_d must be positive")
        if self.l_d <= 0 or self.d1 <= 0 or self.d2 <= 0:
            raise ValueError("l_d, d1 and d2 must be positive")
        if self.angles is None:
            ang = 2.0 * np.pi * np.arange(self.n_s) / self.n_s
            object.__setattr__(self, "angles", ang)
        else:
            ang = np.asarray(self.angles, dtype=np.float64)
            if ang.shape != (self.n_s,):
                raise ValueError("angles must have shape (n_s,)")
            object.__setattr__(self, "angles", ang)

    @property
    def half_detector(self) -> float:
        return self.n_d * self.l_d / 2.0

    @property
    def n_rays(self) -> int:
        return self.n_s * self.n_d


@dataclass(frozen=True)
class ImageGrid:
    """Square n_r x n_r pixel grid centered on the rotation axis.

    Row index increases with +y, column index with +x; pixel (row, col)
    spans [x0 + col*ps, x0 + (col+1)*ps) x [y0 + row*ps, y0 + (row+1)*ps)
    with x0 = y0 = -n_r*ps/2.  Images are flattened row-major.
    """

    n_r: int
    pixel_size: float

    def __post_init__(self):
        if self.n_r < 1:
            raise ValueError("n_r must be positive")
        if not (self.pixel_size > 0):
            raise ValueError("pixel_size must be positive")

    @property
    def half_extent(self) -> float:
        return self.n_r * self.pixel_size / 2.0

    @property
    def n_pixels(self) -> int:
        return self.n_r * self.n_r

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Center coordinates along one axis, (x_cols, y_rows)."""
        h = self.half_extent
        c = -h + (np.arange(self.n_r) + 0.5) * self.pixel_size
        return c, c.copy()


def fov_radius(geom: FanBeamGeometry) -> float:
    """Radius of the disc seen by every fan, from the half fan angle."""
    lh = geom.half_detector
    return geom.d1 * lh / math.hypot(lh, geom.d1 + geom.d2)


def grid_for_fov(geom: FanBeamGeometry, n_r: int) -> ImageGrid:
    """Grid whose square exactly inscribes the FOV disc."""
    return ImageGrid(n_r=n_r, pixel_size=2.0 * fov_radius(geom) / n_r)


def ray_endpoints(geom: FanBeamGeometry, i_angle: int, i_det: int) -> tuple[np.ndarray, np.ndarray]:
    """Source position and detector-element center for one ray."""
    if not (0 <= i_angle < geom.n_s):
        raise ValueError(f"i_angle {i_angle} out of range [0, {geom.n_s})")
    if not (0 <= i_det < geom.n_d):
        raise ValueError(f"i_det {i_det} out of range [0, {geom.n_d})")
    beta = float(geom.angles[i_angle])
    cb, sb = math.cos(beta), math.sin(beta)
    # detector coordinate along the line, symmetric about the axis
    y = (i_det - (geom.n_d - 1) / 2.0) * geom.l_d
    src = np.array([-geom.d1 * cb, -geom.d1 * sb])
    det = np.array([geom.d2 * cb - y * sb, geom.d2 * sb + y * cb])
    return src, det


def all_ray_endpoints(geom: FanBeamGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Endpoints for every ray, angle-major, as (src[n_rays,2], det[n_rays,2])."""
    beta = geom.angles[:, None]
    cb, sb = np.cos(beta), np.sin(beta)
    y = ((np.arange(geom.n_d) - (geom.n_d - 1) / 2.0) * geom.l_d)[None, :]
    src = np.stack(np.broadcast_arrays(-geom.d1 * cb, -geom.d1 * sb), axis=-1)
    src = np.broadcast_to(src, (geom.n_s, geom.n_d, 2)).reshape(-1, 2)
    det = np.stack([geom.d2 * cb - y * sb, geom.d2 * sb + y * cb], axis=-1).reshape(-1, 2)
    return np.ascontiguousarray(src), np.ascontiguousarray(det)


@njit(cache=True, nogil=True)
def _trace_ray(sx, sy, ex, ey, n_r, ps, idx_out, w_out):  # pragma: no cover - jitted
    """Exact intersection lengths of segment (s, e) with the pixel grid.

    Writes (flat index, length) pairs into the output buffers and returns
    the number of entries.  Gridline crossings are enumerated in order and
    the cell of each sub-segment is taken from its midpoint.
    """
    half = n_r * ps / 2.0
    dx = ex - sx
    dy = ey - sy
    length = math.sqrt(dx * dx + dy * dy)
    if length == 0.0:
        return 0

    # clip the parametric segment to the grid square
    t0 = 0.0
    t1 = 1.0
    for axis in range(2):
        d = dx if axis == 0 else dy
        s = sx if axis == 0 else sy
        if d == 0.0:
            if s < -half or s > half:
                return 0
        else:
            ta = (-half - s) / d
            tb = (half - s) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if t0 >= t1:
        return 0

    x0 = sx + t0 * dx
    y0 = sy + t0 * dy
    inf = np.inf
    if dx > 0.0:
        kx = math.floor((x0 + half) / ps)
        tx = ((kx + 1.0) * ps - half - sx) / dx
        dtx = ps / dx
    elif dx < 0.0:
        kx = math.floor((x0 + half) / ps)
        tx = (kx * ps - half - sx) / dx
        dtx = -ps / dx
    else:
        tx = inf
        dtx = inf
    if dy > 0.0:
        ky = math.floor((y0 + half) / ps)
        ty = ((ky + 1.0) * ps - half - sy) / dy
        dty = ps / dy
    elif dy < 0.0:
        ky = math.floor((y0 + half) / ps)
        ty = (ky * ps - half - sy) / dy
        dty = -ps / dy
    else:
        ty = inf
        dty = inf

    count = 0
    t = t0
    max_steps = 4 * n_r + 8
    for _ in range(max_steps):
        if t >= t1:
            break
        tn = tx if tx < ty else ty
        if tn > t1:
            tn = t1
        if tn > t:
            tm = 0.5 * (t + tn)
            col = int(math.floor((sx + tm * dx + half) / ps))
            row = int(math.floor((sy + tm * dy + half) / ps))
            if 0 <= col < n_r and 0 <= row < n_r:
                w = (tn - t) * length
                if w > 0.0:
                    cell = row * n_r + col
                    # consecutive intervals can land in one cell (boundary
                    # slivers); merge so row indices stay unique
                    if count > 0 and idx_out[count - 1] == cell:
                        w_out[count - 1] += w
                    else:
                        idx_out[count] = cell
                        w_out[count] = w
                        count += 1
        if tx <= tn:
            tx += dtx
        if ty <= tn:
            ty += dty
        if tn > t:  # stale crossings below the entry point must not rewind
            t = tn
    return count


@njit(cache=True, nogil=True)
def _build_rows(src, det, n_r, ps):  # pragma: no cover - jitted
    n_rays = src.shape[0]
    per_ray = 2 * n_r + 6
    cap = n_rays * per_ray
    indices = np.empty(cap, np.int32)
    data = np.empty(cap, np.float64)
    indptr = np.empty(n_rays + 1, np.int64)
    ibuf = np.empty(per_ray, np.int64)
    wbuf = np.empty(per_ray, np.float64)
    pos = 0
    indptr[0] = 0
    for l in range(n_rays):
        c = _trace_ray(src[l, 0], src[l, 1], det[l, 0], det[l, 1], n_r, ps, ibuf, wbuf)
        for k in range(c):
            indices[pos] = np.int32(ibuf[k])
            data[pos] = wbuf[k]
            pos += 1
        indptr[l + 1] = pos
    return indptr, indices[:pos].copy(), data[:pos].copy()


@njit(cache=True, nogil=True)
def _row_norms_sq(indptr, data):  # pragma: no cover - jitted
    n = indptr.size - 1
    out = np.zeros(n, np.float64)
    for l in range(n):
        acc = 0.0
        for k in range(indptr[l], indptr[l + 1]):
            acc += data[k] * data[k]
        out[l] = acc
    return out


def trace_ray(src, det, grid: ImageGrid) -> tuple[np.ndarray, np.ndarray]:
    """Single-ray traversal, (flat pixel indices, intersection lengths)."""
    per_ray = 2 * grid.n_r + 6
    ibuf = np.empty(per_ray, np.int64)
    wbuf = np.empty(per_ray, np.float64)
    c = _trace_ray(float(src[0]), float(src[1]), float(det[0]), float(det[1]),
                   grid.n_r, grid.pixel_size, ibuf, wbuf)
    return ibuf[:c].copy(), wbuf[:c].copy()


def geometry_doc(geom: FanBeamGeometry, grid: ImageGrid) -> dict:
    """Canonical JSON-ready description of a scan setup."""
    return {
        "n_s": int(geom.n_s),
        "n_d": int(geom.n_d),
        "l_d": float(geom.l_d),
        "d1": float(geom.d1),
        "d2": float(geom.d2),
        "n_r": int(grid.n_r),
        "pixel_size": float(grid.pixel_size),
        "angles": [float(a) for a in geom.angles],
    }


def geometry_key(geom: FanBeamGeometry, grid: ImageGrid) -> str:
    doc = json.dumps(geometry_doc(geom, grid), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()


def geometry_from_doc(doc: dict) -> tuple[FanBeamGeometry, ImageGrid]:
    """Parse the external geometry document (keys n_s, n_d, l_d, d1, d2, n_r).

    pixel_size defaults to the FOV-inscribing value; angles to the uniform
    [0, 2*pi) sweep.  Unknown keys are rejected.
    """
    allowed = set(GEOMETRY_JSON_KEYS) | {"pixel_size", "angles"}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown geometry keys: {sorted(unknown)}")
    missing = [k for k in GEOMETRY_JSON_KEYS if k not in doc]
    if missing:
        raise ValueError(f"missing geometry keys: {missing}")
    angles = doc.get("angles")
    geom = FanBeamGeometry(
        n_s=int(doc["n_s"]), n_d=int(doc["n_d"]), l_d=float(doc["l_d"]),
        d1=float(doc["d1"]), d2=float(doc["d2"]),
        angles=None if angles is None else np.asarray(angles, float),
    )
    if "pixel_size" in doc:
        grid = ImageGrid(n_r=int(doc["n_r"]), pixel_size=float(doc["pixel_size"]))
    else:
        grid = grid_for_fov(geom, int(doc["n_r"]))
    return geom, grid


@dataclass
class ProjectionMatrix:
    """CSR-style sparse system matrix, one row per ray.

    ``row_norms`` holds the squared Euclidean norm of each row; rows that
    miss the grid are empty with zero norm.
    """

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    row_norms: np.ndarray
    n_rays: int
    n_cols: int
    n_views: int
    n_det: int
    grid: ImageGrid
    key: str
    _csr: csr_matrix | None = field(default=None, repr=False, compare=False)

    def row(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.indptr[l], self.indptr[l + 1]
        return self.indices[s:e], self.data[s:e]

    def to_csr(self) -> csr_matrix:
        if self._csr is None:
            self._csr = csr_matrix(
                (self.data, self.indices, self.indptr),
                shape=(self.n_rays, self.n_cols), copy=False,
            )
        return self._csr

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.to_csr() @ np.asarray(x, np.float64).ravel()

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        return self.to_csr().T @ np.asarray(y, np.float64).ravel()


def build_projection_matrix(geom: FanBeamGeometry, grid: ImageGrid) -> ProjectionMatrix:
    """Trace every ray of the scan against the grid.

    The grid square must cover the FOV disc so no fan is truncated.
    """
    if grid.n_r * grid.pixel_size < 2.0 * fov_radius(geom) * (1.0 - 1e-12):
        raise ValueError(
            f"grid extent {grid.n_r * grid.pixel_size:g} does not cover the "
            f"FOV disc of diameter {2 * fov_radius(geom):g}"
        )
    src, det = all_ray_endpoints(geom)
    indptr, indices, data = _build_rows(src, det, grid.n_r, grid.pixel_size)
    return ProjectionMatrix(
        indptr=indptr, indices=indices, data=data,
        row_norms=_row_norms_sq(indptr, data),
        n_rays=geom.n_rays, n_cols=grid.n_pixels,
        n_views=geom.n_s, n_det=geom.n_d,
        grid=grid, key=geometry_key(geom, grid),
    )


# --- disk cache ---------------------------------------------------------
#
# The container format holds one tensor per file, so a cached matrix is a
# directory keyed by the geometry hash.  int64/f64 arrays are stored as
# [n, 2] i32 tensors holding their raw little-endian bit patterns, which
# keeps cache-loaded matrices bitwise identical to freshly built ones.


def _to_words(arr: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(arr)
    return a.view("<i4").reshape(a.size, 2)


def _from_words(words: np.ndarray, dtype: str) -> np.ndarray:
    return np.ascontiguousarray(words, dtype=np.int32).ravel().view(dtype).copy()


def save_matrix(mat: ProjectionMatrix, cache_dir: str) -> str:
    from .dataset import write_tensor

    path = os.path.join(cache_dir, mat.key)
    os.makedirs(path, exist_ok=True)
    write_tensor(os.path.join(path, "indptr.tsr"), _to_words(mat.indptr), dtype="i32")
    write_tensor(os.path.join(path, "indices.tsr"), mat.indices, dtype="i32")
    write_tensor(os.path.join(path, "weights.tsr"), _to_words(mat.data), dtype="i32")
    meta = {
        "key": mat.key,
        "n_rays": mat.n_rays,
        "n_cols": mat.n_cols,
        "n_views": mat.n_views,
        "n_det": mat.n_det,
        "n_r": mat.grid.n_r,
        "pixel_size": mat.grid.pixel_size,
    }
    tmp = os.path.join(path, "meta.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
    os.replace(tmp, os.path.join(path, "meta.json"))
    return path


def load_matrix(cache_dir: str, key: str) -> ProjectionMatrix | None:
    from .dataset import read_tensor

    path = os.path.join(cache_dir, key)
    if not os.path.isfile(os.path.join(path, "meta.json")):
        return None
    with open(os.path.join(path, "meta.json")) as fh:
        meta = json.load(fh)
    if meta.get("key") != key:
        raise ValueError(f"matrix cache {path} is inconsistent with its key")
    indptr = _from_words(read_tensor(os.path.join(path, "indptr.tsr")), "<i8")
    indices = read_tensor(os.path.join(path, "indices.tsr")).astype(np.int32, copy=False).ravel()
    data = _from_words(read_tensor(os.path.join(path, "weights.tsr")), "<f8")
    grid = ImageGrid(n_r=int(meta["n_r"]), pixel_size=float(meta["pixel_size"]))
    return ProjectionMatrix(
        indptr=indptr, indices=indices, data=data,
        row_norms=_row_norms_sq(indptr, data),
        n_rays=int(meta["n_rays"]), n_cols=int(meta["n_cols"]),
        n_views=int(meta["n_views"]), n_det=int(meta["n_det"]),
        grid=grid, key=key,
    )


def load_or_build(geom: FanBeamGeometry, grid: ImageGrid,
                  cache_dir: str | None = None) -> ProjectionMatrix:
    """Fetch the system matrix from the cache or build and store it."""
    if cache_dir is None:
        return build_projection_matrix(geom, grid)
    key = geometry_key(geom, grid)
    mat = load_matrix(cache_dir, key)
    if mat is None:
        mat = build_projection_matrix(geom, grid)
        save_matrix(mat, cache_dir)
    return mat
