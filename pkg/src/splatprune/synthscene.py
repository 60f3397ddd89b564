"""Seeded synthetic Gaussian scenes and camera rigs.

Randomness comes from numpy's PCG64 generator.  One ``SeedSequence`` per
scene is split into independent child streams (Gaussians, cameras, split),
so changing e.g. the camera count never perturbs the sampled Gaussians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gaussians import GaussianCloud, sh_coeff_count
from .rasterizer import Camera
from .shading import SH_C0


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_gaussians: int = 500
    box_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    box_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sh_degree: int = 3
    opacity_min: float = 0.3
    opacity_max: float = 0.95
    scale_min: float = 0.06
    scale_max: float = 0.2
    color_min: float = 0.1
    color_max: float = 0.9
    sh_rest_std: float = 0.05
    n_cameras: int = 20
    image_width: int = 48
    image_height: int = 48
    fov_degrees: float = 50.0
    orbit_radius: float = 4.0
    elevation_degrees: float = 20.0
    test_fraction: float = 0.1

    def __post_init__(self):
        if self.n_gaussians < 1 or self.n_cameras < 1:
            raise ValueError("n_gaussians and n_cameras must be positive")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image size must be positive")
        if any(hi <= lo for lo, hi in zip(self.box_min, self.box_max)):
            raise ValueError(f"degenerate box {self.box_min} .. {self.box_max}")
        for lo, hi, name in ((self.opacity_min, self.opacity_max, "opacity"),
                             (self.scale_min, self.scale_max, "scale"),
                             (self.color_min, self.color_max, "color")):
            if not lo <= hi:
                raise ValueError(f"{name} range is not ordered: {lo} > {hi}")
        if not (0.0 < self.opacity_min and self.opacity_max < 1.0):
            raise ValueError("opacity range must lie inside (0, 1)")
        if self.scale_min <= 0:
            raise ValueError("scale_min must be positive")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in [0, 1)")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in [0, 3]")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.box_min, float) + np.asarray(self.box_max, float))


@dataclass
class Scene:
    cloud: GaussianCloud
    cameras: list[Camera]
    splits: list[str]

    @property
    def train_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == "train"]

    @property
    def test_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == "test"]


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


def _sample_gaussians(rng, n, box_min, box_max, degree, opacity, scale, color, sh_rest_std) -> GaussianCloud:
    lo = np.asarray(box_min, float)
    hi = np.asarray(box_max, float)
    means = lo + (hi - lo) * rng.random((n, 3))
    quats = rng.normal(size=(n, 4))
    quats[np.linalg.norm(quats, axis=1) < 1e-6] = (1.0, 0.0, 0.0, 0.0)
    log_scales = rng.uniform(math.log(scale[0]), math.log(scale[1]), (n, 3))
    opac = rng.uniform(opacity[0], opacity[1], n)
    k = sh_coeff_count(degree)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = (rng.uniform(color[0], color[1], (n, 3)) - 0.5) / SH_C0
    if k > 1:
        sh[:, 1:, :] = rng.normal(0.0, sh_rest_std, (n, k - 1, 3))
    return GaussianCloud(
        means=means.astype(np.float32),
        quats=quats.astype(np.float32),
        log_scales=log_scales.astype(np.float32),
        opacity_logits=_logit(opac).astype(np.float32),
        sh=sh.astype(np.float32),
    )


def orbit_cameras(spec: SceneSpec, rng: np.random.Generator | None = None) -> list[Camera]:
    """Cameras evenly spaced in azimuth, alternating elevation, all aimed at the box center."""
    center = spec.center
    fx = spec.image_width / (2.0 * math.tan(math.radians(spec.fov_degrees) / 2.0))
    fy = fx
    phase = rng.uniform(0.0, 2 * math.pi) if rng is not None else 0.0
    cams = []
    for i in range(spec.n_cameras):
        az = phase + 2.0 * math.pi * i / spec.n_cameras
        el = math.radians(spec.elevation_degrees) * (1.0 if i % 2 == 0 else -0.5)
        eye = center + spec.orbit_radius * np.array([math.cos(el) * math.cos(az),
                                                      math.sin(el),
                                                      math.cos(el) * math.sin(az)])
        cams.append(Camera.look_at(eye, center, (0.0, -1.0, 0.0), fx, fy,
                                   spec.image_width, spec.image_height))
    return cams


def view_split(n_cameras: int, test_fraction: float, rng: np.random.Generator) -> list[str]:
    n_test = int(round(test_fraction * n_cameras))
    if test_fraction > 0 and n_cameras > 1:
        n_test = max(1, n_test)
    n_test = min(n_test, n_cameras - 1)
    test = set(rng.permutation(n_cameras)[:n_test].tolist())
    return ["test" if i in test else "train" for i in range(n_cameras)]


def generate(spec: SceneSpec) -> Scene:
    g_rng, c_rng, s_rng = _streams(spec.seed, 3)
    cloud = _sample_gaussians(
        g_rng, spec.n_gaussians, spec.box_min, spec.box_max, spec.sh_degree,
        (spec.opacity_min, spec.opacity_max), (spec.scale_min, spec.scale_max),
        (spec.color_min, spec.color_max), spec.sh_rest_std,
    )
    cams = orbit_cameras(spec, c_rng)
    return Scene(cloud=cloud, cameras=cams, splits=view_split(spec.n_cameras, spec.test_fraction, s_rng))


@dataclass(frozen=True)
class MixtureSpec:
    """Two populations: many small opaque Gaussians and fewer large, faint ones.

    Scales are sampled log-uniformly, so the diffuse population spans about
    three decades of volume.
    """

    seed: int = 0
    n_compact: int = 240
    n_diffuse: int = 160
    compact_opacity: tuple[float, float] = (0.55, 0.95)
    compact_scale: tuple[float, float] = (0.03, 0.09)
    diffuse_opacity: tuple[float, float] = (0.03, 0.3)
    diffuse_scale: tuple[float, float] = (0.05, 0.6)
    box_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    box_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sh_degree: int = 3

    def __post_init__(self):
        if self.n_compact < 0 or self.n_diffuse < 0 or self.n_compact + self.n_diffuse < 1:
            raise ValueError("mixture needs at least one Gaussian")
        for lo, hi in (self.compact_opacity, self.diffuse_opacity, self.compact_scale, self.diffuse_scale):
            if not lo <= hi:
                raise ValueError("mixture ranges must be ordered")
        if any(hi <= lo for lo, hi in zip(self.box_min, self.box_max)):
            raise ValueError(f"degenerate box {self.box_min} .. {self.box_max}")


def mixture_cloud(spec: MixtureSpec) -> tuple[GaussianCloud, np.ndarray]:
    """Return the cloud and per-Gaussian labels (0 = compact, 1 = diffuse), interleaved by a seeded shuffle."""
    a_rng, b_rng, p_rng = _streams(spec.seed, 3)
    color = (0.1, 0.9)
    parts = [
        _sample_gaussians(a_rng, spec.n_compact, spec.box_min, spec.box_max, spec.sh_degree,
                          spec.compact_opacity, spec.compact_scale, color, 0.05),
        _sample_gaussians(b_rng, spec.n_diffuse, spec.box_min, spec.box_max, spec.sh_degree,
                          spec.diffuse_opacity, spec.diffuse_scale, color, 0.05),
    ]
    labels = np.concatenate([np.zeros(spec.n_compact, np.int64), np.ones(spec.n_diffuse, np.int64)])
    perm = p_rng.permutation(labels.size)
    merged = GaussianCloud(
        means=np.concatenate([p.means for p in parts])[perm],
        quats=np.concatenate([p.quats for p in parts])[perm],
        log_scales=np.concatenate([p.log_scales for p in parts])[perm],
        opacity_logits=np.concatenate([p.opacity_logits for p in parts])[perm],
        sh=np.concatenate([p.sh for p in parts])[perm],
    )
    return merged, labels[perm]
