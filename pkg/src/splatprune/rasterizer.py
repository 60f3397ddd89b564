"""CPU tile rasterizer for Gaussian clouds with an analytic backward pass.

Pipeline: EWA projection of every Gaussian, a single global depth sort
(ties by index), binning into square tiles, then front-to-back compositing
per pixel.  Pixel ``(row, col)`` samples image-plane point ``(col, row)``,
so a Gaussian on the optical axis lands exactly on pixel ``(cy, cx)``.

Fixed constants: opacity clamp 0.99, skip below 1/255, early termination
once transmittance drops under 1e-4, 0.3 px^2 screen-space dilation, 3-sigma
frame culling.  Background is black.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _raster_kernels as K
from .gaussians import Gaussian, GaussianCloud, quat_to_rotmat
from .shading import sh_basis, sh_basis_grad

DILATION = 0.3
CULL_SIGMA = 3.0
DEFAULT_TILE = 16


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # world -> camera, (3, 3)
    translation: np.ndarray  # (3,)
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation must be orthonormal 3x3")

    @property
    def R(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=np.float64)

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None, near=0.01, far=100.0):
        """Camera at ``eye`` looking at ``target``; +z forward, +y down in the image."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(
            fx=float(fx), fy=float(fy),
            cx=float((width - 1) / 2 if cx is None else cx),
            cy=float((height - 1) / 2 if cy is None else cy),
            width=int(width), height=int(height),
            rotation=rot, translation=-rot @ eye, near=near, far=far,
        )


@dataclass
class RenderOutput:
    rgb: np.ndarray       # (H, W, 3)
    alpha: np.ndarray     # (H, W)
    overdraw: np.ndarray  # (H, W) int


@dataclass
class GaussianGrads:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in
                               (self.means, self.quats, self.log_scales, self.opacity_logits, self.sh)])


@dataclass
class Splats:
    """Screen-space state of every Gaussian for one camera, plus what backward needs."""

    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray      # (N, 3): A, B, C of the inverse 2D covariance
    depths: np.ndarray
    visible: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    colors_raw: np.ndarray
    bin_radii: np.ndarray
    order: np.ndarray       # visible indices in depth order
    # intermediates
    cam_points: np.ndarray
    jac: np.ndarray
    proj: np.ndarray
    cov3d: np.ndarray
    rot: np.ndarray
    scales: np.ndarray
    quat_unit: np.ndarray
    quat_norm: np.ndarray
    view_dirs: np.ndarray
    view_dist: np.ndarray
    basis: np.ndarray


def _as64(cloud: GaussianCloud):
    return (np.asarray(cloud.means, dtype=np.float64),
            np.asarray(cloud.quats, dtype=np.float64),
            np.asarray(cloud.log_scales, dtype=np.float64),
            np.asarray(cloud.opacity_logits, dtype=np.float64),
            np.asarray(cloud.sh, dtype=np.float64))


def preprocess(cloud: GaussianCloud, cam: Camera) -> Splats:
    mu, q, ls, logit, sh = _as64(cloud)
    n = mu.shape[0]
    degree = cloud.sh_degree
    W, t = cam.R, cam.t

    qnorm = np.sqrt(np.einsum("ni,ni->n", q, q))
    if np.any(qnorm == 0.0):
        raise ValueError("zero quaternion")
    qn = q / qnorm[:, None]
    rot = quat_to_rotmat(qn)
    s = np.exp(ls)
    m = rot * s[:, None, :]
    cov3d = np.einsum("nik,njk->nij", m, m)

    pc = np.einsum("ij,nj->ni", W, mu) + t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    in_depth = (z > cam.near) & (z < cam.far)
    zs = np.where(in_depth, z, 1.0)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * x / (zs * zs)
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * y / (zs * zs)
    proj = np.einsum("nij,jk->nik", jac, W)
    cov2d = np.einsum("nij,njk,nlk->nil", proj, cov3d, proj)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    means2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    sigma = np.sqrt(lam_max)
    r3 = CULL_SIGMA * sigma
    on_frame = ((means2d[:, 0] + r3 >= -0.5) & (means2d[:, 0] - r3 <= cam.width - 0.5)
                & (means2d[:, 1] + r3 >= -0.5) & (means2d[:, 1] - r3 <= cam.height - 0.5))
    visible = in_depth & on_frame & (det > 0)

    opac = 1.0 / (1.0 + np.exp(-logit))
    # beyond this radius opacity * gaussian < 1/255, so the splat can never be composited
    with np.errstate(divide="ignore", invalid="ignore"):
        reach = np.where(255.0 * opac > 1.0, np.sqrt(2.0 * np.log(np.maximum(255.0 * opac, 1.0))), 0.0)
    bin_radii = np.where(visible & (reach > 0), reach * sigma + 1.0, 0.0)

    dirs = mu - cam.center
    dist = np.sqrt(np.einsum("ni,ni->n", dirs, dirs))
    dist = np.where(dist > 0, dist, 1.0)
    v = dirs / dist[:, None]
    basis = sh_basis(v, degree)
    colors_raw = np.einsum("nk,nkc->nc", basis, sh) + 0.5
    colors = np.clip(colors_raw, 0.0, 1.0)

    vis_idx = np.flatnonzero(visible)
    order = vis_idx[np.lexsort((vis_idx, z[vis_idx]))]

    return Splats(
        means2d=means2d, cov2d=cov2d, conics=conics, depths=z, visible=visible,
        opacities=opac, colors=colors, colors_raw=colors_raw, bin_radii=bin_radii, order=order,
        cam_points=pc, jac=jac, proj=proj, cov3d=cov3d, rot=rot, scales=s,
        quat_unit=qn, quat_norm=qnorm, view_dirs=v, view_dist=dist, basis=basis,
    )


def project(g: Gaussian, cam: Camera):
    """Screen-space ``(mean2d, cov2d, depth)`` of one Gaussian, or ``None`` if culled."""
    sp = preprocess(GaussianCloud.from_gaussians([g], dtype=np.float64), cam)
    if not sp.visible[0]:
        return None
    return sp.means2d[0], sp.cov2d[0], float(sp.depths[0])


def _sorted_inputs(sp: Splats):
    o = sp.order
    return (np.ascontiguousarray(sp.means2d[o]), np.ascontiguousarray(sp.conics[o]),
            np.ascontiguousarray(sp.opacities[o]), np.ascontiguousarray(sp.colors[o]),
            np.ascontiguousarray(sp.bin_radii[o]))


def rasterize_splats(sp: Splats, cam: Camera, tile: int = DEFAULT_TILE) -> RenderOutput:
    means, conics, opac, colors, radii = _sorted_inputs(sp)
    offsets, flat = K.bin_splats(means, radii, cam.width, cam.height, tile)
    rgb, alpha, overdraw = K.render_tiles(means, conics, opac, colors, offsets, flat,
                                          cam.width, cam.height, tile)
    return RenderOutput(rgb=rgb, alpha=alpha, overdraw=overdraw)


def rasterize(cloud: GaussianCloud, cam: Camera, tile: int = DEFAULT_TILE) -> RenderOutput:
    if len(cloud) == 0:
        return RenderOutput(rgb=np.zeros((cam.height, cam.width, 3)),
                            alpha=np.zeros((cam.height, cam.width)),
                            overdraw=np.zeros((cam.height, cam.width), np.int64))
    return rasterize_splats(preprocess(cloud, cam), cam, tile)


def _dquat_unit(qn: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    G = g_rot
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
              + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    gy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
              - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    gz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
              + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


def preprocess_backward(cloud: GaussianCloud, cam: Camera, sp: Splats,
                        g_mean2d, g_conic, g_opac, g_color) -> GaussianGrads:
    """Chain screen-space gradients back to the raw Gaussian parameters."""
    _, _, _, _, sh = _as64(cloud)
    degree = cloud.sh_degree
    W = cam.R
    fx, fy = cam.fx, cam.fy

    # color: clamp, SH, view direction
    g_raw = g_color * ((sp.colors_raw > 0.0) & (sp.colors_raw < 1.0))
    g_sh = sp.basis[:, :, None] * g_raw[:, None, :]
    dbasis = sh_basis_grad(sp.view_dirs, degree)
    g_basis = np.einsum("nkc,nc->nk", sh, g_raw)
    g_v = np.einsum("nk,nkd->nd", g_basis, dbasis)
    v = sp.view_dirs
    g_mu = (g_v - v * np.einsum("nd,nd->n", g_v, v)[:, None]) / sp.view_dist[:, None]

    # conic = inverse(cov2d)
    a, b, c = sp.cov2d[:, 0, 0], sp.cov2d[:, 0, 1], sp.cov2d[:, 1, 1]
    det = a * c - b * b
    d2 = det * det
    gA, gB, gC = g_conic[:, 0], g_conic[:, 1], g_conic[:, 2]
    ga = (-gA * c * c + gB * b * c - gC * b * b) / d2
    gb = (2 * gA * b * c - gB * (det + 2 * b * b) + 2 * gC * a * b) / d2
    gc = (-gA * b * b + gB * a * b - gC * a * a) / d2
    G2 = np.zeros((len(a), 2, 2))
    G2[:, 0, 0] = ga
    G2[:, 0, 1] = G2[:, 1, 0] = 0.5 * gb
    G2[:, 1, 1] = gc

    # cov2d = T cov3d T^T with T = J W
    Tm = sp.proj
    g_cov3d = np.einsum("nji,njk,nkl->nil", Tm, G2, Tm)
    g_T = 2.0 * np.einsum("nij,njk,nkl->nil", G2, Tm, sp.cov3d)
    g_J = np.einsum("nik,jk->nij", g_T, W)

    x, y, z = sp.cam_points[:, 0], sp.cam_points[:, 1], sp.cam_points[:, 2]
    z = np.where(sp.visible, z, 1.0)
    z2, z3 = z * z, z * z * z
    gx = -g_J[:, 0, 2] * fx / z2 + g_mean2d[:, 0] * fx / z
    gy = -g_J[:, 1, 2] * fy / z2 + g_mean2d[:, 1] * fy / z
    gz = (-g_J[:, 0, 0] * fx / z2 + g_J[:, 0, 2] * 2 * fx * x / z3
          - g_J[:, 1, 1] * fy / z2 + g_J[:, 1, 2] * 2 * fy * y / z3
          - g_mean2d[:, 0] * fx * x / z2 - g_mean2d[:, 1] * fy * y / z2)
    g_pc = np.stack([gx, gy, gz], axis=1)
    g_mu = g_mu + np.einsum("ni,ij->nj", g_pc, W)

    # cov3d = M M^T with M = R diag(s)
    m = sp.rot * sp.scales[:, None, :]
    g_m = 2.0 * np.einsum("nij,njk->nik", g_cov3d, m)
    g_s = np.einsum("nij,nij->nj", g_m, sp.rot)
    g_ls = g_s * sp.scales
    g_rot = g_m * sp.scales[:, None, :]
    g_qn = _dquat_unit(sp.quat_unit, g_rot)
    qn = sp.quat_unit
    g_q = (g_qn - qn * np.einsum("ni,ni->n", g_qn, qn)[:, None]) / sp.quat_norm[:, None]

    g_logit = g_opac * sp.opacities * (1.0 - sp.opacities)

    hidden = ~sp.visible
    for arr in (g_mu, g_q, g_ls, g_logit, g_sh):
        arr[hidden] = 0.0
    return GaussianGrads(means=g_mu, quats=g_q, log_scales=g_ls, opacity_logits=g_logit, sh=g_sh)


def rasterize_backward(cloud: GaussianCloud, cam: Camera, upstream_grad: np.ndarray,
                       tile: int = DEFAULT_TILE) -> GaussianGrads:
    """Gradient of ``sum(upstream_grad * rasterize(cloud, cam).rgb)`` w.r.t. raw parameters."""
    n = len(cloud)
    if n == 0:
        z = np.zeros
        return GaussianGrads(z((0, 3)), z((0, 4)), z((0, 3)), z((0,)), z((0,) + cloud.sh.shape[1:]))
    upstream = np.ascontiguousarray(upstream_grad, dtype=np.float64)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ValueError(f"upstream gradient shape {upstream.shape} != {(cam.height, cam.width, 3)}")
    sp = preprocess(cloud, cam)
    means, conics, opac, colors, radii = _sorted_inputs(sp)
    offsets, flat = K.bin_splats(means, radii, cam.width, cam.height, tile)
    gm, gcon, gop, gcol = K.render_tiles_backward(means, conics, opac, colors, offsets, flat,
                                                  cam.width, cam.height, tile, upstream)
    o = sp.order
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    g_mean2d[o] = gm
    g_conic[o] = gcon
    g_opac[o] = gop
    g_color[o] = gcol
    return preprocess_backward(cloud, cam, sp, g_mean2d, g_conic, g_opac, g_color)


def boundary_signature(cloud: GaussianCloud, cam: Camera, tile: int = DEFAULT_TILE) -> bytes:
    """Discrete state of a render: visibility, depth order, per-pixel composited
    and clamped counts, and color clamp masks.

    Two parameter settings with equal signatures lie on the same smooth
    piece of the rendering function.
    """
    sp = preprocess(cloud, cam)
    means, conics, opac, _, radii = _sorted_inputs(sp)
    offsets, flat = K.bin_splats(means, radii, cam.width, cam.height, tile)
    states = K.pixel_states(means, conics, opac, offsets, flat, cam.width, cam.height, tile)
    in_gamut = (sp.colors_raw > 0.0) & (sp.colors_raw < 1.0)
    return b"".join([sp.visible.tobytes(), sp.order.tobytes(), states.tobytes(), in_gamut.tobytes()])


def camera_from_row(values) -> tuple[Camera, str]:
    """Parse ``fx fy cx cy w h r00..r22 t0 t1 t2 split`` (one camera-file line)."""
    if len(values) != 19:
        raise ValueError(f"camera line needs 19 fields, got {len(values)}")
    fx, fy, cx, cy = (float(v) for v in values[:4])
    w, h = int(values[4]), int(values[5])
    pose = np.array([float(v) for v in values[6:18]]).reshape(3, 4)
    split = values[18]
    if split not in ("train", "test"):
        raise ValueError(f"camera split must be 'train' or 'test', got {split!r}")
    cam = Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h,
                 rotation=pose[:, :3].copy(), translation=pose[:, 3].copy())
    return cam, split


def camera_to_row(cam: Camera, split: str) -> str:
    pose = np.concatenate([cam.R, cam.t[:, None]], axis=1).ravel()
    fields = [repr(float(cam.fx)), repr(float(cam.fy)), repr(float(cam.cx)), repr(float(cam.cy)),
              str(cam.width), str(cam.height)] + [repr(float(p)) for p in pose] + [split]
    return " ".join(fields)


def write_cameras(path, cameras: list[Camera], splits: list[str]) -> None:
    with open(path, "w") as fh:
        for cam, split in zip(cameras, splits):
            fh.write(camera_to_row(cam, split) + "\n")


def read_cameras(path) -> tuple[list[Camera], list[str]]:
    cams, splits = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                cam, split = camera_from_row(line.split())
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            cams.append(cam)
            splits.append(split)
    return cams, splits


def mean_overdraw(cloud: GaussianCloud, cameras: list[Camera]) -> float:
    """Average number of composited splats per pixel over a set of views."""
    totals = [rasterize(cloud, cam).overdraw.mean() for cam in cameras]
    return float(np.mean(totals)) if totals else 0.0
