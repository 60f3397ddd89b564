"""Image quality metrics and pruning distribution statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianCloud
from .pruner import log10_volumes

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; identical images give 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with 1-D kernel ``g`` along both axes."""
    k = g.size
    h, w = img.shape
    rows = np.zeros((h - k + 1, w))
    for i in range(k):
        rows += g[i] * img[i:i + h - k + 1, :]
    out = np.zeros((h - k + 1, w - k + 1))
    for j in range(k):
        out += g[j] * rows[:, j:j + w - k + 1]
    return out


def _filter_valid_transpose(m: np.ndarray, g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    k = g.size
    h, w = shape
    rows = np.zeros((h - k + 1, w))
    for j in range(k):
        rows[:, j:j + w - k + 1] += g[j] * m
    out = np.zeros((h, w))
    for i in range(k):
        out[i:i + h - k + 1, :] += g[i] * rows
    return out


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    g = gaussian_window()
    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num1 = 2.0 * mx * my + SSIM_C1
    num2 = 2.0 * sxy + SSIM_C2
    den1 = mx * mx + my * my + SSIM_C1
    den2 = sxx + syy + SSIM_C2
    return g, mx, my, num1, num2, den1, den2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows of the channel-mean images."""
    x, y = _gray(a), _gray(b)
    if np.array_equal(x, y):
        return 1.0
    _, _, _, num1, num2, den1, den2 = _ssim_terms(x, y)
    return float(np.mean((num1 * num2) / (den1 * den2)))


def ssim_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gradient of ``ssim(a, b)`` with respect to ``a`` (same shape as ``a``)."""
    x, y = _gray(a), _gray(b)
    g, mx, my, num1, num2, den1, den2 = _ssim_terms(x, y)
    count = num1.size
    d = den1 * den2
    # partials of the SSIM map w.r.t. mu_x, sigma_x^2, sigma_xy
    d_mx = (2.0 * my * num2 - 2.0 * mx * num1 * num2 / den1) / d
    d_sxx = -num1 * num2 / (d * den2)
    d_sxy = 2.0 * num1 / d
    # sigma terms depend on mu_x too
    d_mean = (d_mx - 2.0 * mx * d_sxx - my * d_sxy) / count
    gx = (_filter_valid_transpose(d_mean, g, x.shape)
          + 2.0 * x * _filter_valid_transpose(d_sxx / count, g, x.shape)
          + y * _filter_valid_transpose(d_sxy / count, g, x.shape))
    a = np.asarray(a)
    if a.ndim == 3:
        return np.repeat(gx[:, :, None] / a.shape[2], a.shape[2], axis=2)
    return gx


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    per_view: list[tuple[str, float, float]] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"{k}={v}" for k, v in self.meta.items()]
        lines.append(f"psnr_mean={self.psnr:.6f}")
        lines.append(f"ssim_mean={self.ssim:.6f}")
        for name, p, s in self.per_view:
            lines.append(f"view.{name}=psnr:{p:.6f},ssim:{s:.6f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        meta, per_view = {}, []
        p = s = float("nan")
        for line in text.splitlines():
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            if key == "psnr_mean":
                p = float(value)
            elif key == "ssim_mean":
                s = float(value)
            elif key.startswith("view."):
                parts = dict(item.split(":") for item in value.split(","))
                per_view.append((key[5:], float(parts["psnr"]), float(parts["ssim"])))
            else:
                meta[key] = value
        return cls(psnr=p, ssim=s, per_view=per_view, meta=meta)


def evaluate(renders: dict[str, np.ndarray], targets: dict[str, np.ndarray], meta=None) -> MetricReport:
    names = sorted(renders)
    missing = [n for n in names if n not in targets]
    if missing:
        raise KeyError(f"no target for views {missing}")
    per_view = [(n, psnr(renders[n], targets[n]), ssim(renders[n], targets[n])) for n in names]
    return MetricReport(
        psnr=float(np.mean([p for _, p, _ in per_view])) if per_view else float("nan"),
        ssim=float(np.mean([s for _, _, s in per_view])) if per_view else float("nan"),
        per_view=per_view,
        meta=dict(meta or {}),
    )


@dataclass
class DistributionStats:
    opacity_edges: np.ndarray
    log_volume_edges: np.ndarray
    selected_opacity_hist: np.ndarray
    rejected_opacity_hist: np.ndarray
    selected_log_volume_hist: np.ndarray
    rejected_log_volume_hist: np.ndarray
    medians: dict[str, float]

    def to_csv(self) -> str:
        rows = ["quantity,bin_lo,bin_hi,selected,rejected"]
        for i in range(self.opacity_edges.size - 1):
            rows.append(f"opacity,{self.opacity_edges[i]!r},{self.opacity_edges[i + 1]!r},"
                        f"{self.selected_opacity_hist[i]},{self.rejected_opacity_hist[i]}")
        for i in range(self.log_volume_edges.size - 1):
            rows.append(f"log10_volume,{self.log_volume_edges[i]!r},{self.log_volume_edges[i + 1]!r},"
                        f"{self.selected_log_volume_hist[i]},{self.rejected_log_volume_hist[i]}")
        return "\n".join(rows) + "\n"

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.medians.items())


def _median(x: np.ndarray) -> float:
    return float(np.median(x)) if x.size else float("nan")


def distribution_stats(cloud: GaussianCloud, selected_indices, bins: int = 50) -> DistributionStats:
    """Opacity and log10-volume histograms of selected vs rejected Gaussians."""
    n = len(cloud)
    idx = np.asarray(selected_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"selected indices must lie in [0, {n})")
    mask = np.zeros(n, dtype=bool)
    mask[idx] = True
    opacity = cloud.opacities
    logv = log10_volumes(cloud)
    op_edges = np.linspace(0.0, 1.0, bins + 1)
    lo, hi = (float(logv.min()), float(logv.max())) if n else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    lv_edges = np.linspace(lo, hi, bins + 1)
    return DistributionStats(
        opacity_edges=op_edges,
        log_volume_edges=lv_edges,
        selected_opacity_hist=np.histogram(opacity[mask], op_edges)[0],
        rejected_opacity_hist=np.histogram(opacity[~mask], op_edges)[0],
        selected_log_volume_hist=np.histogram(logv[mask], lv_edges)[0],
        rejected_log_volume_hist=np.histogram(logv[~mask], lv_edges)[0],
        medians={
            "selected_opacity_median": _median(opacity[mask]),
            "rejected_opacity_median": _median(opacity[~mask]),
            "selected_log10_volume_median": _median(logv[mask]),
            "rejected_log10_volume_median": _median(logv[~mask]),
        },
    )
