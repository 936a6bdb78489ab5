"""Polychromatic fan-beam projection and photon-counting noise.

For each ray with material line integrals (y1, y2) the measured value is

    p = -ln( sum_m S_m * dE * exp(-phi_m*y1 - theta_m*y2) )

evaluated with a max-shifted log-sum-exp.  Noise follows the counting
model: N ~ Poisson(I0 * exp(-p)), p_noisy = -ln(max(N, 1) / I0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ProjectionMatrix
from .phantom import ImagePair
from .spectra import AlignedSpectrum, MaterialTable, SpectrumTable, align, is_normalized


@dataclass
class SinogramPair:
    """One sinogram per spectrum, shaped (n_s, n_d), plus the geometry hash
    tying them to the system matrix they were produced with."""

    p1: np.ndarray
    p2: np.ndarray
    geometry_key: str

    def __post_init__(self):
        if self.p1.shape != self.p2.shape or self.p1.ndim != 2:
            raise ValueError("p1 and p2 must be 2-D arrays of equal shape")


def log_projection(y1: np.ndarray, y2: np.ndarray, aligned: AlignedSpectrum) -> np.ndarray:
    """Stabilized -ln sum_m sde_m exp(-phi_m y1 - theta_m y2), elementwise."""
    y1 = np.asarray(y1, np.float64)
    y2 = np.asarray(y2, np.float64)
    with np.errstate(divide="ignore"):
        log_sde = np.log(aligned.sde)
    a = log_sde[None, :] - np.outer(y1, aligned.phi) - np.outer(y2, aligned.theta)
    c = np.max(np.where(np.isfinite(a), a, -np.inf), axis=1)
    return -(c + np.log(np.exp(a - c[:, None]).sum(axis=1)))


def forward_project(pair: ImagePair, matrix: ProjectionMatrix,
                    spec_low: SpectrumTable, spec_high: SpectrumTable,
                    materials: MaterialTable) -> SinogramPair:
    """Project both channels through both spectra.

    Spectra must be normalized (area 1 within 1e-9); each is aligned with
    the material table internally.  Raises on a grid/image shape mismatch.
    """
    if pair.f.shape != (matrix.grid.n_r, matrix.grid.n_r):
        raise ValueError(
            f"image shape {pair.f.shape} does not match grid {matrix.grid.n_r}"
        )
    for s in (spec_low, spec_high):
        if not is_normalized(s, 1e-9):
            raise ValueError(f"spectrum '{s.label}' is not normalized (area {s.area:g})")
    y1 = matrix.matvec(pair.f.ravel())
    y2 = matrix.matvec(pair.g.ravel())
    a1 = align(spec_low, materials)
    a2 = align(spec_high, materials)
    shape = (matrix.n_views, matrix.n_det)
    return SinogramPair(
        p1=log_projection(y1, y2, a1).reshape(shape),
        p2=log_projection(y1, y2, a2).reshape(shape),
        geometry_key=matrix.key,
    )


def add_poisson_noise(sino: SinogramPair, i0: float, seed) -> SinogramPair:
    """Counting noise at incident fluence i0 per ray; zero counts clamp to 1.

    Both sinograms are drawn from one Philox stream, p1 first.
    """
    if not (i0 > 0):
        raise ValueError("i0 must be positive")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    out = []
    for p in (sino.p1, sino.p2):
        if not np.all(np.isfinite(p)):
            raise ValueError("sinogram contains non-finite values")
        lam = i0 * np.exp(-np.asarray(p, np.float64))
        counts = rng.poisson(lam)
        out.append(-np.log(np.maximum(counts, 1) / i0))
    return SinogramPair(p1=out[0], p2=out[1], geometry_key=sino.geometry_key)
