"""Geometry-driven pruning: rank Gaussians by z-scored opacity and volume.

    score_i = w * z(opacity_i) + (1 - w) * z(volume_i)

with ``w = lambda_alpha`` and ``z`` the population z-score over the cloud.
No images are involved; only the stored 3D attributes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianCloud, Gaussian

VOLUME_SPACES = ("raw", "log")


@dataclass(frozen=True)
class PruneConfig:
    lambda_alpha: float = 0.3
    keep_fraction: float | None = None
    keep_count: int | None = None
    volume_space: str = "raw"

    def __post_init__(self):
        if not 0.0 <= self.lambda_alpha <= 1.0:
            raise ValueError(f"lambda_alpha must be in [0, 1], got {self.lambda_alpha}")
        if (self.keep_fraction is None) == (self.keep_count is None):
            raise ValueError("set exactly one of keep_fraction and keep_count")
        if self.keep_fraction is not None and not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.keep_count is not None and self.keep_count < 1:
            raise ValueError(f"keep_count must be positive, got {self.keep_count}")
        if self.volume_space not in VOLUME_SPACES:
            raise ValueError(f"volume_space must be one of {VOLUME_SPACES}, got {self.volume_space!r}")

    def resolve_k(self, n: int) -> int:
        if self.keep_count is not None:
            k = self.keep_count
        else:
            # round, not floor: 0.5 * 588000 must give 294000 even if the product lands a ulp low
            k = max(1, int(round(self.keep_fraction * n)))
        if k > n:
            raise ValueError(f"keep_count {k} exceeds cloud size {n}")
        return k


@dataclass
class ScoreReport:
    scores: np.ndarray
    selected: np.ndarray
    opacity: np.ndarray
    log10_volume: np.ndarray
    stats: dict[str, float] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return int(self.selected.size)

    def to_text(self) -> str:
        lines = [f"n={self.scores.size}", f"k={self.k}"]
        lines += [f"{key}={value!r}" for key, value in self.stats.items()]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        mask = np.zeros(self.scores.size, dtype=bool)
        mask[self.selected] = True
        rows = ["index,score,opacity,log10_volume,selected"]
        for i in range(self.scores.size):
            rows.append(f"{i},{self.scores[i]!r},{self.opacity[i]!r},{self.log10_volume[i]!r},{int(mask[i])}")
        return "\n".join(rows) + "\n"


def _exact_integers(x: np.ndarray) -> tuple[list[int], int]:
    """Integers ``X_i`` and a shared exponent ``b`` with ``x_i == X_i * 2**b`` exactly."""
    m, e = np.frexp(x)
    mant = (m * 2.0 ** 53).astype(np.int64).tolist()
    shift = (e.astype(np.int64) - 53).tolist()
    base = min(shift)
    return [a << (s - base) for a, s in zip(mant, shift)], base


def _sqrt_ratio(p: int, q: int) -> float:
    """Correctly rounded ``sqrt(p / q)`` for non-negative integers ``p`` and positive ``q``."""
    if p == 0:
        return 0.0
    k = 64 + max(0, (q.bit_length() - p.bit_length()) // 2 + 1)
    scaled = (p << (2 * k)) // q
    t = math.isqrt(scaled)
    # sticky bit so the int -> float conversion sees inexact results as above the midpoint
    sticky = int(t * t * q != p << (2 * k))
    return math.ldexp(float((t << 1) | sticky), -(k + 1))


def zscore(values) -> np.ndarray:
    """Population z-score, correctly rounded.  A zero-variance input maps to all zeros.

    Mean and variance are exact (integer arithmetic on the float mantissas)
    and each ``(x_i - mean) / std`` is rounded once, so exact ties between
    scores survive: two Gaussians always get z-scores of exactly +1 and -1.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("zscore needs at least one value")
    if not np.all(np.isfinite(x)):
        raise ValueError("zscore input must be finite")
    n = x.size
    ints, _ = _exact_integers(x)
    total = sum(ints)
    dev = [n * v - total for v in ints]     # proportional to x_i - mean
    ss = sum(d * d for d in dev)
    if ss == 0:
        return np.zeros_like(x)
    # z_i = dev_i * sqrt(n / ss); the common power-of-two scale cancels
    return np.array([math.copysign(_sqrt_ratio(n * d * d, ss), d) if d else 0.0 for d in dev])


def volume(g: Gaussian) -> float:
    """Ellipsoid volume ``4/3 pi s_x s_y s_z`` of the activated scales."""
    s = np.exp(np.asarray(g.log_scale, dtype=np.float64))
    return 4.0 / 3.0 * math.pi * float(s[0] * s[1] * s[2])


def volumes(cloud: GaussianCloud) -> np.ndarray:
    s = cloud.scales
    return 4.0 / 3.0 * math.pi * (s[:, 0] * s[:, 1] * s[:, 2])


def log10_volumes(cloud: GaussianCloud) -> np.ndarray:
    ls = cloud.log_scales.astype(np.float64)
    return (ls[:, 0] + ls[:, 1] + ls[:, 2]) / math.log(10.0) + math.log10(4.0 / 3.0 * math.pi)


def score(cloud: GaussianCloud, cfg: PruneConfig) -> np.ndarray:
    if len(cloud) == 0:
        raise ValueError("cannot score an empty cloud")
    vol = volumes(cloud) if cfg.volume_space == "raw" else np.log(volumes(cloud))
    lam = cfg.lambda_alpha
    return lam * zscore(cloud.opacities) + (1.0 - lam) * zscore(vol)


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties to the lower index, returned ascending."""
    s = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= s.size:
        raise ValueError(f"k must be in [1, {s.size}], got {k}")
    order = np.lexsort((np.arange(s.size), -s))
    return np.sort(order[:k])


def _split_stats(prefix: str, values: np.ndarray) -> dict[str, float]:
    if values.size == 0:
        return {f"{prefix}_mean": float("nan"), f"{prefix}_median": float("nan")}
    return {f"{prefix}_mean": float(np.mean(values)), f"{prefix}_median": float(np.median(values))}


def select_top_k(scores, k: int, cloud: GaussianCloud | None = None) -> tuple[np.ndarray, ScoreReport]:
    selected = top_k_indices(scores, k)
    s = np.asarray(scores, dtype=np.float64)
    if cloud is None:
        opacity = np.full(s.size, np.nan)
        logv = np.full(s.size, np.nan)
    else:
        opacity = cloud.opacities
        logv = log10_volumes(cloud)
    mask = np.zeros(s.size, dtype=bool)
    mask[selected] = True
    stats: dict[str, float] = {}
    stats.update(_split_stats("selected_opacity", opacity[mask]))
    stats.update(_split_stats("rejected_opacity", opacity[~mask]))
    stats.update(_split_stats("selected_log10_volume", logv[mask]))
    stats.update(_split_stats("rejected_log10_volume", logv[~mask]))
    return selected, ScoreReport(scores=s, selected=selected, opacity=opacity, log10_volume=logv, stats=stats)


def prune(cloud: GaussianCloud, cfg: PruneConfig) -> tuple[GaussianCloud, ScoreReport]:
    """Keep the top-K Gaussians by score, in their original relative order."""
    k = cfg.resolve_k(len(cloud))
    scores = score(cloud, cfg)
    selected, report = select_top_k(scores, k, cloud)
    report.stats["lambda_alpha"] = cfg.lambda_alpha
    return cloud.select(selected), report
