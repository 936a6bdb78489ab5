"""Energy spectra and basis-material attenuation tables.

A spectrum is a discrete weight per energy bin on a uniform keV grid; a
material table holds the two basis attenuation curves phi (bone-like) and
theta (water-like) on its own ascending grid.  Channel f of an image pair
attenuates with phi, channel g with theta.

The bundled CSV tables are approximate by construction (filtered
bremsstrahlung shapes and log-log interpolated attenuation anchors) and
carry "approx" in their filenames.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np

SPECTRUM_HEADER = "energy_kev,weight"
MATERIALS_HEADER = "energy_kev,phi,theta"

BUNDLED_FILES = {
    "low": "spectrum_80kv_approx.csv",
    "high": "spectrum_140kv_approx.csv",
    "materials": "materials_bone_water_approx.csv",
}


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SpectrumTable:
    """Per-bin weights on a uniform, strictly ascending energy grid."""

    energies: np.ndarray
    weights: np.ndarray
    delta_e: float
    label: str = ""

    def __post_init__(self):
        e = _readonly(self.energies)
        w = _readonly(self.weights)
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "weights", w)
        if e.ndim != 1 or e.shape != w.shape or e.size == 0:
            raise ValueError("energies and weights must be matching 1-D arrays")
        if not (self.delta_e > 0):
            raise ValueError("delta_e must be positive")
        if e.size > 1:
            d = np.diff(e)
            if np.any(d <= 0):
                raise ValueError("energies must be strictly ascending")
            if np.max(np.abs(d - self.delta_e)) > 1e-9 * self.delta_e:
                raise ValueError("energy grid spacing is not uniform delta_e")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if not np.any(w > 0):
            raise ValueError("spectrum must have at least one positive weight")

    @property
    def area(self) -> float:
        return float(self.weights.sum() * self.delta_e)


@dataclass(frozen=True)
class MaterialTable:
    """phi/theta attenuation curves, strictly positive on an ascending grid."""

    energies: np.ndarray
    phi: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        e = _readonly(self.energies)
        p = _readonly(self.phi)
        t = _readonly(self.theta)
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "phi", p)
        object.__setattr__(self, "theta", t)
        if e.ndim != 1 or e.shape != p.shape or e.shape != t.shape or e.size < 2:
            raise ValueError("material table needs matching 1-D columns with >= 2 rows")
        if np.any(np.diff(e) <= 0):
            raise ValueError("material energies must be strictly ascending")
        if np.any(p <= 0) or np.any(t <= 0):
            raise ValueError("phi and theta must be strictly positive")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
            raise ValueError("phi and theta must be finite")


@dataclass(frozen=True)
class AlignedSpectrum:
    """A normalized spectrum restricted to its support, with phi/theta
    interpolated onto the same bins.  ``sde`` is weight * delta_e, the
    quantity every spectral sum is taken against."""

    energies: np.ndarray
    sde: np.ndarray
    phi: np.ndarray
    theta: np.ndarray
    delta_e: float
    label: str = ""


def normalize(spec: SpectrumTable) -> SpectrumTable:
    """Scale weights so sum(weight) * delta_e == 1; no-op when already true."""
    area = spec.area
    if area <= 0:
        raise ValueError("spectrum area must be positive")
    if abs(area - 1.0) <= 1e-12:
        return spec
    return SpectrumTable(
        energies=spec.energies, weights=spec.weights / area,
        delta_e=spec.delta_e, label=spec.label,
    )


def is_normalized(spec: SpectrumTable, tol: float = 1e-9) -> bool:
    return abs(spec.area - 1.0) <= tol


def align(spec: SpectrumTable, mat: MaterialTable) -> AlignedSpectrum:
    """Interpolate phi/theta onto the spectrum support.

    Leading and trailing zero-weight bins are trimmed (keeping the grid
    uniform); interior zeros stay and contribute exactly nothing.  The
    material grid must cover the trimmed support.
    """
    nz = np.nonzero(spec.weights > 0)[0]
    lo, hi = nz[0], nz[-1] + 1
    e = spec.energies[lo:hi]
    w = spec.weights[lo:hi]
    if e[0] < mat.energies[0] or e[-1] > mat.energies[-1]:
        raise ValueError(
            f"material table [{mat.energies[0]:g}, {mat.energies[-1]:g}] keV does "
            f"not cover the spectrum support [{e[0]:g}, {e[-1]:g}] keV"
        )
    return AlignedSpectrum(
        energies=e,
        sde=_readonly(w * spec.delta_e),
        phi=_readonly(np.interp(e, mat.energies, mat.phi)),
        theta=_readonly(np.interp(e, mat.energies, mat.theta)),
        delta_e=spec.delta_e,
        label=spec.label,
    )


def _parse_csv(path: str, header: str) -> list[list[float]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    if lines[0].strip() != header:
        raise ValueError(f"{path}: expected header '{header}', got '{lines[0].strip()}'")
    ncol = header.count(",") + 1
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != ncol:
            raise ValueError(f"{path}: line {ln}: expected {ncol} columns, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ValueError(f"{path}: line {ln}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def load_spectrum(path: str) -> SpectrumTable:
    """Read an `energy_kev,weight` CSV.  Single-row tables get delta_e 1."""
    rows = _parse_csv(str(path), SPECTRUM_HEADER)
    e = np.array([r[0] for r in rows])
    w = np.array([r[1] for r in rows])
    if e.size > 1:
        delta = float(e[-1] - e[0]) / (e.size - 1)
    else:
        delta = 1.0
    label = os.path.splitext(os.path.basename(str(path)))[0]
    return SpectrumTable(energies=e, weights=w, delta_e=delta, label=label)


def load_materials(path: str) -> MaterialTable:
    rows = _parse_csv(str(path), MATERIALS_HEADER)
    arr = np.array(rows)
    return MaterialTable(energies=arr[:, 0], phi=arr[:, 1], theta=arr[:, 2])


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def table_sha256(table: SpectrumTable | MaterialTable) -> str:
    """Content hash of a table, independent of the file it came from."""
    h = hashlib.sha256()
    if isinstance(table, SpectrumTable):
        h.update(b"spectrum")
        h.update(np.float64(table.delta_e).tobytes())
        h.update(table.energies.tobytes())
        h.update(table.weights.tobytes())
    else:
        h.update(b"materials")
        h.update(table.energies.tobytes())
        h.update(table.phi.tobytes())
        h.update(table.theta.tobytes())
    return h.hexdigest()


def bundled_path(which: str) -> str:
    """Filesystem path of a bundled table: 'low', 'high' or 'materials'."""
    name = BUNDLED_FILES[which]
    return str(resources.files("dsct").joinpath("data").joinpath(name))


def bundled_spectrum(which: str) -> SpectrumTable:
    return load_spectrum(bundled_path(which))


def bundled_materials() -> MaterialTable:
    return load_materials(bundled_path("materials"))
