"""Row-action dual-spectral reconstruction of the material images.

Every measured ray yields one equation per spectrum.  Expanding the
log-projection to first order in the line integrals (y1, y2) around the
current state turns each equation into a hyperplane

    a_k1 * y1 + a_k2 * y2 = b_k,   a_k1 = Phi/q, a_k2 = Theta/q,

with q, Phi, Theta the spectrum-weighted sums of exp(-phi*y1 - theta*y2),
its phi-moment and its theta-moment.  A sweep visits rays in acquisition
order.  For each ray the state is moved onto the first-spectrum
hyperplane along an oblique direction

    dir = lambda1 * dir1 + lambda2 * dir2

where dir1 is the unit normal of the target hyperplane and dir2 is the
in-plane unit direction of the *other* hyperplane whose angle to dir1 is
acute; both hyperplanes are then re-expanded at the updated state and the
second-spectrum hyperplane is handled the same way.  The pixel update
distributes the (y1, y2) move over the row by minimum norm, i.e. via
r_l^T / ||r_l||^2.  With lambda2 = 0 every step degenerates to the
classical single-spectrum ART projection, which is what `run_eart` runs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .forward import SinogramPair
from .geometry import ProjectionMatrix
from .spectra import (AlignedSpectrum, MaterialTable, SpectrumTable, align,
                      is_normalized, normalize)

OPMT_CONFIG_KEYS = ("n_sweeps", "lambda1", "lambda2", "relaxation", "nonneg", "skip_eps")


@dataclass(frozen=True)
class OpmtConfig:
    n_sweeps: int = 10
    lambda1: float = 1.0
    lambda2: float = 1.0
    relaxation: float = 1.0
    nonneg: bool = False
    skip_eps: float = 1e-12

    def __post_init__(self):
        if self.n_sweeps < 0:
            raise ValueError("n_sweeps must be >= 0")
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("lambda1 and lambda2 cannot both be zero")
        if not (0 < self.relaxation <= 2):
            raise ValueError("relaxation must lie in (0, 2]")
        if not (self.skip_eps > 0):
            raise ValueError("skip_eps must be positive")

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in OPMT_CONFIG_KEYS},
                          sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "OpmtConfig":
        doc = json.loads(text)
        unknown = set(doc) - set(OPMT_CONFIG_KEYS)
        if unknown:
            raise ValueError(f"unknown OPMT config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class ReconState:
    """Reconstruction output plus per-sweep diagnostics.

    ``residuals`` has one row per completed sweep (plus the initial state)
    holding ||p_k - p_hat_k||_2 for both spectra.  ``diagnostics`` records
    the worst post-step hyperplane inconsistency and the smallest
    dir1.dir2 seen, both over the entire run.
    """

    f: np.ndarray
    g: np.ndarray
    sweep_count: int
    residuals: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def compute_direction(a11: float, a12: float, a21: float, a22: float,
                      lam1: float, lam2: float) -> tuple[float, float]:
    """Oblique step direction for the hyperplane with normal (a11, a12).

    (a21, a22) is the other hyperplane's normal.  Degenerate cases
    (parallel hyperplanes or a zero second normal) fall back to the unit
    normal dir1 alone.
    """
    n1 = math.hypot(a11, a12)
    if n1 == 0.0:
        raise ValueError("hyperplane normal is zero")
    d1x = a11 / n1
    d1y = a12 / n1
    n2 = math.hypot(a21, a22)
    det = a11 * a22 - a12 * a21
    if n2 == 0.0 or det == 0.0:
        return d1x, d1y
    d2x = a22 / n2
    d2y = -a21 / n2
    if det < 0.0:
        d2x = -d2x
        d2y = -d2y
    return lam1 * d1x + lam2 * d2x, lam1 * d1y + lam2 * d2y


@njit(cache=True, nogil=True)
def _linearize(y1, y2, sde, phi, th):  # pragma: no cover - jitted
    """(p_hat, a1, a2) of the log-projection expanded at (y1, y2)."""
    m = sde.size
    c = -np.inf
    for i in range(m):
        if sde[i] > 0.0:
            t = -phi[i] * y1 - th[i] * y2
            if t > c:
                c = t
    q = 0.0
    fsum = 0.0
    tsum = 0.0
    for i in range(m):
        if sde[i] > 0.0:
            w = sde[i] * math.exp(-phi[i] * y1 - th[i] * y2 - c)
            q += w
            fsum += w * phi[i]
            tsum += w * th[i]
    return -(c + math.log(q)), fsum / q, tsum / q


@njit(cache=True, nogil=True)
def _direction(a11, a12, a21, a22, lam1, lam2):  # pragma: no cover - jitted
    """compute_direction plus the dir1.dir2 dot (1.0 when degenerate)."""
    n1 = math.hypot(a11, a12)
    d1x = a11 / n1
    d1y = a12 / n1
    n2 = math.hypot(a21, a22)
    det = a11 * a22 - a12 * a21
    if n2 == 0.0 or det == 0.0:
        return d1x, d1y, 1.0
    d2x = a22 / n2
    d2y = -a21 / n2
    if det < 0.0:
        d2x = -d2x
        d2y = -d2y
    return lam1 * d1x + lam2 * d2x, lam1 * d1y + lam2 * d2y, d1x * d2x + d1y * d2y


@njit(cache=True, nogil=True)
def _sweep_kernel(fvec, gvec, indptr, indices, data, row_norms, row_floor,
                  p1, p2, sde1, phi1, th1, sde2, phi2, th2,
                  lam1, lam2, relax, nonneg, skip_eps):  # pragma: no cover - jitted
    """One in-place sweep.  Returns (status, ray, max_h1_rel, min_dir_dot);
    status 0 is success, 1/2 flag a non-finite H1/H2 step."""
    n_rays = p1.size
    max_h1 = 0.0
    min_dot = 1.0
    for l in range(n_rays):
        s = indptr[l]
        e = indptr[l + 1]
        if s == e or row_norms[l] <= row_floor:
            continue
        rn = row_norms[l]
        y1 = 0.0
        y2 = 0.0
        for k in range(s, e):
            j = indices[k]
            y1 += data[k] * fvec[j]
            y2 += data[k] * gvec[j]

        # first hyperplane, both spectra expanded at the current state
        ph1, a11, a12 = _linearize(y1, y2, sde1, phi1, th1)
        _, a21, a22 = _linearize(y1, y2, sde2, phi2, th2)
        dx, dy, dot = _direction(a11, a12, a21, a22, lam1, lam2)
        if dot < min_dot:
            min_dot = dot
        den = a11 * dx + a12 * dy
        if abs(den) <= skip_eps:
            continue
        step = relax * (p1[l] - ph1) / den
        if not math.isfinite(step):
            return 1, l, max_h1, min_dot
        sf = step * dx / rn
        sg = step * dy / rn
        for k in range(s, e):
            j = indices[k]
            fvec[j] += sf * data[k]
            gvec[j] += sg * data[k]

        ny1 = 0.0
        ny2 = 0.0
        for k in range(s, e):
            j = indices[k]
            ny1 += data[k] * fvec[j]
            ny2 += data[k] * gvec[j]
        # consistency with the pre-step expansion of the target hyperplane
        b1 = p1[l] - ph1 + a11 * y1 + a12 * y2
        r = abs(a11 * ny1 + a12 * ny2 - b1)
        scale = abs(b1)
        alt = abs(a11 * ny1) + abs(a12 * ny2)
        if alt > scale:
            scale = alt
        if scale > 0.0:
            rel = r / scale
            if rel > max_h1:
                max_h1 = rel

        # second hyperplane at the refreshed expansion
        _, c11, c12 = _linearize(ny1, ny2, sde1, phi1, th1)
        ph2, c21, c22 = _linearize(ny1, ny2, sde2, phi2, th2)
        dx2, dy2, dot2 = _direction(c21, c22, c11, c12, lam1, lam2)
        if dot2 < min_dot:
            min_dot = dot2
        den2 = c21 * dx2 + c22 * dy2
        if abs(den2) > skip_eps:
            step2 = relax * (p2[l] - ph2) / den2
            if not math.isfinite(step2):
                return 2, l, max_h1, min_dot
            sf2 = step2 * dx2 / rn
            sg2 = step2 * dy2 / rn
            for k in range(s, e):
                j = indices[k]
                fvec[j] += sf2 * data[k]
                gvec[j] += sg2 * data[k]

        if nonneg:
            for k in range(s, e):
                j = indices[k]
                if fvec[j] < 0.0:
                    fvec[j] = 0.0
                if gvec[j] < 0.0:
                    gvec[j] = 0.0
    return 0, -1, max_h1, min_dot


@njit(cache=True, nogil=True)
def _residual_kernel(fvec, gvec, indptr, indices, data,
                     p1, p2, sde1, phi1, th1, sde2, phi2, th2):  # pragma: no cover - jitted
    """(||p1 - p1_hat||_2, ||p2 - p2_hat||_2) at the current state."""
    acc1 = 0.0
    acc2 = 0.0
    for l in range(p1.size):
        y1 = 0.0
        y2 = 0.0
        for k in range(indptr[l], indptr[l + 1]):
            j = indices[k]
            y1 += data[k] * fvec[j]
            y2 += data[k] * gvec[j]
        ph1, _, _ = _linearize(y1, y2, sde1, phi1, th1)
        ph2, _, _ = _linearize(y1, y2, sde2, phi2, th2)
        d1 = p1[l] - ph1
        d2 = p2[l] - ph2
        acc1 += d1 * d1
        acc2 += d2 * d2
    return math.sqrt(acc1), math.sqrt(acc2)


def linearize_ray(state: ReconState, row: tuple[np.ndarray, np.ndarray],
                  spec: SpectrumTable | AlignedSpectrum,
                  mat: MaterialTable | None = None) -> tuple[float, float, float]:
    """Expansion (p_hat, a1, a2) of one ray at the given state.

    ``row`` is an (indices, weights) pair as returned by
    ProjectionMatrix.row.  Accepts a raw spectrum plus material table or a
    pre-aligned spectrum.
    """
    if isinstance(spec, AlignedSpectrum):
        a = spec
    else:
        if mat is None:
            raise ValueError("material table required for a raw spectrum")
        a = align(normalize_if_needed(spec), mat)
    idx, w = row
    y1 = float(np.dot(w, state.f.ravel()[idx]))
    y2 = float(np.dot(w, state.g.ravel()[idx]))
    return _linearize(y1, y2, a.sde, a.phi, a.theta)


def normalize_if_needed(spec: SpectrumTable) -> SpectrumTable:
    return spec if is_normalized(spec, 1e-9) else normalize(spec)


def _prepare(sino: SinogramPair, matrix: ProjectionMatrix,
             spectra: tuple[SpectrumTable, SpectrumTable],
             materials: MaterialTable):
    if sino.geometry_key != matrix.key:
        raise ValueError(
            f"sinogram geometry {sino.geometry_key[:12]} does not match "
            f"matrix geometry {matrix.key[:12]}"
        )
    if sino.p1.shape != (matrix.n_views, matrix.n_det):
        raise ValueError(
            f"sinogram shape {sino.p1.shape} does not match "
            f"({matrix.n_views}, {matrix.n_det})"
        )
    spec_low, spec_high = spectra
    for s in (spec_low, spec_high):
        if not is_normalized(s, 1e-9):
            raise ValueError(f"spectrum '{s.label}' is not normalized (area {s.area:g})")
    return align(spec_low, materials), align(spec_high, materials)


def run(sino: SinogramPair, matrix: ProjectionMatrix,
        spectra: tuple[SpectrumTable, SpectrumTable],
        materials: MaterialTable, config: OpmtConfig = OpmtConfig()) -> ReconState:
    """Reconstruct (f, g) from a sinogram pair, starting from zero images.

    Rays whose matrix row is empty (or of vanishing norm, below 1e-18 of a
    squared pixel) are skipped, as are steps whose denominator falls below
    skip_eps.  Non-finite steps abort with a RuntimeError naming the sweep
    and ray.
    """
    a1, a2 = _prepare(sino, matrix, spectra, materials)
    n_r = matrix.grid.n_r
    fvec = np.zeros(matrix.n_cols)
    gvec = np.zeros(matrix.n_cols)
    p1 = np.ascontiguousarray(sino.p1, np.float64).ravel()
    p2 = np.ascontiguousarray(sino.p2, np.float64).ravel()
    row_floor = (1e-9 * matrix.grid.pixel_size) ** 2

    residuals = np.empty((config.n_sweeps + 1, 2))
    residuals[0] = _residual_kernel(
        fvec, gvec, matrix.indptr, matrix.indices, matrix.data,
        p1, p2, a1.sde, a1.phi, a1.theta, a2.sde, a2.phi, a2.theta,
    )
    max_h1 = 0.0
    min_dot = 1.0
    for sweep in range(config.n_sweeps):
        status, ray, h1, dot = _sweep_kernel(
            fvec, gvec, matrix.indptr, matrix.indices, matrix.data,
            matrix.row_norms, row_floor, p1, p2,
            a1.sde, a1.phi, a1.theta, a2.sde, a2.phi, a2.theta,
            config.lambda1, config.lambda2, config.relaxation,
            config.nonneg, config.skip_eps,
        )
        if status != 0:
            which = "first" if status == 1 else "second"
            raise RuntimeError(
                f"non-finite {which}-spectrum step at sweep {sweep + 1}, ray {ray}"
            )
        max_h1 = max(max_h1, h1)
        min_dot = min(min_dot, dot)
        residuals[sweep + 1] = _residual_kernel(
            fvec, gvec, matrix.indptr, matrix.indices, matrix.data,
            p1, p2, a1.sde, a1.phi, a1.theta, a2.sde, a2.phi, a2.theta,
        )
    return ReconState(
        f=fvec.reshape(n_r, n_r), g=gvec.reshape(n_r, n_r),
        sweep_count=config.n_sweeps, residuals=residuals,
        diagnostics={"max_h1_rel": max_h1, "min_direction_dot": min_dot},
    )


def run_eart(sino: SinogramPair, matrix: ProjectionMatrix,
             spectra: tuple[SpectrumTable, SpectrumTable],
             materials: MaterialTable, config: OpmtConfig = OpmtConfig()) -> ReconState:
    """Classical alternating single-spectrum ART: the lambda2 = 0 special
    case, run through the identical sweep kernel."""
    return run(sino, matrix, spectra, materials,
               replace(config, lambda1=1.0, lambda2=0.0))


def residuals_csv(state: ReconState) -> str:
    """Per-sweep residual history as `sweep,residual_p1,residual_p2`."""
    if state.residuals is None:
        raise ValueError("state carries no residual history")
    lines = ["sweep,residual_p1,residual_p2"]
    for i, (r1, r2) in enumerate(state.residuals):
        lines.append(f"{i},{float(r1)!r},{float(r2)!r}")
    return "\n".join(lines) + "\n"


def write_residuals(path: str, state: ReconState) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(residuals_csv(state))
    os.replace(tmp, path)
