"""Image-quality metrics for reconstructed material pairs.

SSIM uses the windowed formulation: 11x11 sampled Gaussian weights
(sigma 1.5, normalized), population (uncorrected) covariances, constants
C1 = (0.01 * data_range)^2 and C2 = (0.03 * data_range)^2, averaged over
the valid (fully covered) region only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as2d(x) -> np.ndarray:
    a = np.asarray(x, np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-D image")
    return a


def mse(x, y) -> float:
    a = _as2d(x)
    b = _as2d(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def psnr(x, truth, peak: float) -> float:
    """10*log10(peak^2 / mse); +inf when the images match exactly."""
    if not (peak > 0):
        raise ValueError("peak must be positive")
    m = mse(x, truth)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / m)


def _gaussian_window(win: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = win // 2
    g = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    v = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.einsum("ijkl,kl->ij", v, kernel, optimize=True)


def ssim(x, truth, data_range: float, win: int = SSIM_WIN,
         sigma: float = SSIM_SIGMA) -> float:
    a = _as2d(x)
    b = _as2d(truth)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < win:
        raise ValueError(f"images must be at least {win} pixels per side")
    if not (data_range > 0) or not math.isfinite(data_range):
        raise ValueError("data_range must be positive and finite")
    kernel = _gaussian_window(win, sigma)
    mu_a = _windowed_mean(a, kernel)
    mu_b = _windowed_mean(b, kernel)
    saa = _windowed_mean(a * a, kernel) - mu_a * mu_a
    sbb = _windowed_mean(b * b, kernel) - mu_b * mu_b
    sab = _windowed_mean(a * b, kernel) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-channel metrics of one sample.  psnr/ssim are NaN when the
    ground-truth channel is flat zero (peak undefined)."""

    f: dict = field(default_factory=dict)
    g: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"f": dict(self.f), "g": dict(self.g)}


def _channel_metrics(pred: np.ndarray, true: np.ndarray) -> dict:
    peak = float(np.max(true))
    m = mse(pred, true)
    if peak > 0:
        return {"mse": m, "psnr": psnr(pred, true, peak),
                "ssim": ssim(pred, true, peak), "peak": peak}
    return {"mse": m, "psnr": math.inf if m == 0.0 else math.nan,
            "ssim": math.nan, "peak": peak}


def evaluate_pair(pred_f, pred_g, true_f, true_g) -> MetricReport:
    """Score a predicted material pair against its ground truth.

    The PSNR peak and SSIM data_range are the per-channel maximum of the
    ground truth.
    """
    return MetricReport(
        f=_channel_metrics(_as2d(pred_f), _as2d(true_f)),
        g=_channel_metrics(_as2d(pred_g), _as2d(true_g)),
    )


METRIC_NAMES = ("mse", "psnr", "ssim")


def average_reports(reports: list[MetricReport]) -> dict:
    """NaN-aware per-channel averages over a list of sample reports."""
    if not reports:
        raise ValueError("no reports to average")
    out = {"count": len(reports)}
    for ch in ("f", "g"):
        out[ch] = {}
        for name in METRIC_NAMES:
            vals = np.array([getattr(r, ch)[name] for r in reports])
            kept = vals[~np.isnan(vals)]  # NaN = undefined (flat truth); inf stays
            out[ch][name] = float(kept.mean()) if kept.size else math.nan
    return out


def table_csv(columns: dict[str, dict]) -> str:
    """Metric table, rows metric x channel, one column per model.

    ``columns`` maps a model label to an average_reports result.
    """
    if not columns:
        raise ValueError("no columns to tabulate")
    labels = list(columns)
    lines = ["metric,channel," + ",".join(labels)]
    for name in METRIC_NAMES:
        for ch in ("f", "g"):
            cells = [f"{columns[lb][ch][name]:.9g}" for lb in labels]
            lines.append(f"{name},{ch}," + ",".join(cells))
    return "\n".join(lines) + "\n"
