"""Random overlapping-ellipse phantoms for the two material channels.

Each channel draws Poisson(2) ellipses.  Per ellipse the draw order is
fixed: intensity, semi-axis a, semi-axis b, rotation, center angle,
center radius; changing it would silently change every seeded phantom.
Centers are placed so the whole ellipse stays inside the FOV disc, and
overlapping ellipses combine by per-pixel maximum, not by summing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import ImageGrid

ELLIPSE_RATE = 2.0
INTENSITY_MEAN = 1.0
INTENSITY_STD = 0.1
AXIS_FRACTION = (0.1, 0.5)


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float
    value: float


@dataclass(frozen=True)
class ImagePair:
    """The two basis-material images; f attenuates with phi, g with theta."""

    f: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        if self.f.shape != self.g.shape or self.f.ndim != 2:
            raise ValueError("f and g must be 2-D arrays of equal shape")


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def draw_ellipses(rng: np.random.Generator, fov_r: float) -> list[Ellipse]:
    """Sample one channel's ellipse list; may be empty."""
    out = []
    for _ in range(rng.poisson(ELLIPSE_RATE)):
        value = max(float(rng.normal(INTENSITY_MEAN, INTENSITY_STD)), 0.0)
        a = float(rng.uniform(AXIS_FRACTION[0] * fov_r, AXIS_FRACTION[1] * fov_r))
        b = float(rng.uniform(AXIS_FRACTION[0] * fov_r, AXIS_FRACTION[1] * fov_r))
        angle = float(rng.uniform(0.0, math.pi))
        c_angle = float(rng.uniform(0.0, 2.0 * math.pi))
        # uniform over the disc that keeps the ellipse fully inside the FOV
        c_rad = (fov_r - max(a, b)) * math.sqrt(float(rng.uniform()))
        out.append(Ellipse(
            cx=c_rad * math.cos(c_angle), cy=c_rad * math.sin(c_angle),
            a=a, b=b, angle=angle, value=value,
        ))
    return out


def rasterize(ellipses: list[Ellipse], grid: ImageGrid) -> np.ndarray:
    """Paint ellipses onto the grid by pixel-center membership."""
    img = np.zeros((grid.n_r, grid.n_r))
    xc, yc = grid.pixel_centers()
    xx = xc[None, :]
    yy = yc[:, None]
    for e in ellipses:
        ca, sa = math.cos(e.angle), math.sin(e.angle)
        dx = xx - e.cx
        dy = yy - e.cy
        u = (dx * ca + dy * sa) / e.a
        v = (-dx * sa + dy * ca) / e.b
        inside = u * u + v * v <= 1.0
        np.maximum(img, np.where(inside, e.value, 0.0), out=img)
    return img


def generate_pair(grid: ImageGrid, fov_r: float, seed) -> ImagePair:
    """Deterministic two-channel phantom; f is drawn first, then g."""
    if fov_r <= 0:
        raise ValueError("fov_r must be positive")
    rng = _rng(seed)
    f = rasterize(draw_ellipses(rng, fov_r), grid)
    g = rasterize(draw_ellipses(rng, fov_r), grid)
    return ImagePair(f=f, g=g)
