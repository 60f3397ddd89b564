"""Real spherical harmonics color and the peak-normalized Gaussian kernel."""

from __future__ import annotations

import numpy as np

from .gaussians import Gaussian, covariance

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
MAX_DEGREE = 3


def _check_degree(degree: int) -> None:
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values ``(..., (L+1)^2)`` for unit directions ``(..., 3)``.

    Ordering is ``l^2 + l + m`` with ``m`` running from ``-l`` to ``l``.
    """
    _check_degree(degree)
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + ((degree + 1) ** 2,), dtype=np.float64)
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Gradient of each basis polynomial w.r.t. (x, y, z): shape ``(..., (L+1)^2, 3)``.

    The polynomials are differentiated as functions on R^3; callers project
    onto the sphere through the normalization Jacobian.
    """
    _check_degree(degree)
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    g = np.zeros(d.shape[:-1] + ((degree + 1) ** 2, 3), dtype=np.float64)
    if degree >= 1:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 0] = -2.0 * SH_C2[2] * x
        g[..., 6, 1] = -2.0 * SH_C2[2] * y
        g[..., 6, 2] = 4.0 * SH_C2[2] * z
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = 2.0 * SH_C2[4] * x
        g[..., 8, 1] = -2.0 * SH_C2[4] * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = SH_C3[0] * 6.0 * x * y
        g[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 10, 0] = SH_C3[1] * y * z
        g[..., 10, 1] = SH_C3[1] * x * z
        g[..., 10, 2] = SH_C3[1] * x * y
        g[..., 11, 0] = SH_C3[2] * (-2.0 * x * y)
        g[..., 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[..., 11, 2] = SH_C3[2] * 8.0 * y * z
        g[..., 12, 0] = SH_C3[3] * (-6.0 * x * z)
        g[..., 12, 1] = SH_C3[3] * (-6.0 * y * z)
        g[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[..., 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[..., 13, 1] = SH_C3[4] * (-2.0 * x * y)
        g[..., 13, 2] = SH_C3[4] * 8.0 * x * z
        g[..., 14, 0] = SH_C3[5] * 2.0 * x * z
        g[..., 14, 1] = SH_C3[5] * (-2.0 * y * z)
        g[..., 14, 2] = SH_C3[5] * (xx - yy)
        g[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return g


def sh_color_raw(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Unclamped colors: ``sum_k sh[..., k, c] * Y_k(dir) + 0.5``.

    ``sh`` is ``(..., K, 3)``, ``dirs`` is ``(..., 3)`` unit vectors.
    """
    sh = np.asarray(sh, dtype=np.float64)
    degree = int(round(np.sqrt(sh.shape[-2]))) - 1
    basis = sh_basis(dirs, degree)
    return np.einsum("...k,...kc->...c", basis, sh) + 0.5


def sh_color(g: Gaussian, view_dir) -> np.ndarray:
    """RGB of a Gaussian seen along ``view_dir`` (camera toward Gaussian), clamped to [0, 1]."""
    v = np.asarray(view_dir, dtype=np.float64)
    return np.clip(sh_color_raw(g.sh_coeffs, v), 0.0, 1.0)


def gaussian_density(g: Gaussian, x) -> float:
    """``exp(-1/2 (x-mu)^T Sigma^-1 (x-mu))``, equal to 1 at the mean."""
    cov = covariance(g)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        cov = cov + 1e-8 * np.eye(3)
    d = np.asarray(x, dtype=np.float64) - np.asarray(g.position, dtype=np.float64)
    q = float(d @ np.linalg.solve(cov, d))
    return float(np.exp(-0.5 * max(q, 0.0)))
