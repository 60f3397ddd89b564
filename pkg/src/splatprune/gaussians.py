"""Gaussian cloud data model and binary PLY interchange.

Parameters are kept raw (pre-activation), exactly as stored by 3DGS
exporters: ``exp`` turns log-scales into scales, ``sigmoid`` turns opacity
logits into opacities, and quaternions are normalized at the point of use.

On-disk layout (binary little-endian PLY, one float32 per property)::

    x y z  nx ny nz  f_dc_0..2  f_rest_0..M-1  opacity  scale_0..2  rot_0..3

with ``M = 3 * ((L+1)**2 - 1)``.  ``f_rest`` is channel-major: the first
``(L+1)**2 - 1`` entries are the red higher-order coefficients, then green,
then blue.  Quaternions are ``(w, x, y, z)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

_PLY_MAGIC = b"ply\n"
_FORMAT_LINE = b"format binary_little_endian 1.0"
_END_HEADER = b"end_header\n"


class PlyError(ValueError):
    """Raised when a PLY file cannot be loaded.

    ``offset`` is the byte offset in the file where the problem was found.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def floats_per_gaussian(degree: int) -> int:
    """Number of float32 properties per vertex on disk."""
    return 3 + 3 + 3 * sh_coeff_count(degree) + 1 + 3 + 4


def property_names(degree: int) -> list[str]:
    n_rest = 3 * (sh_coeff_count(degree) - 1)
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2"]
    names += ["rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def ply_header(n: int, degree: int) -> bytes:
    lines = [b"ply", _FORMAT_LINE, b"element vertex %d" % n]
    lines += [b"property float " + name.encode() for name in property_names(degree)]
    lines.append(b"end_header")
    return b"\n".join(lines) + b"\n"


def ply_file_size(n: int, degree: int = 3) -> int:
    """Exact size in bytes of the file ``write_ply`` emits for ``n`` Gaussians."""
    return len(ply_header(n, degree)) + n * floats_per_gaussian(degree) * 4


@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray       # (3,)
    rotation_raw: np.ndarray   # (4,) w, x, y, z; not normalized
    log_scale: np.ndarray      # (3,)
    opacity_logit: float
    sh_coeffs: np.ndarray      # ((L+1)^2, 3), DC first

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[0]))) - 1

    @property
    def scale(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))

    @property
    def opacity(self) -> float:
        return float(sigmoid(np.float64(self.opacity_logit)))

    @property
    def rotation(self) -> np.ndarray:
        q = np.asarray(self.rotation_raw, dtype=np.float64)
        norm = np.linalg.norm(q)
        if norm == 0.0:
            raise ValueError("zero quaternion")
        return q / norm


@dataclass(frozen=True)
class GaussianCloud:
    """Struct-of-arrays Gaussian cloud.  Row index is identity.

    Arrays are never modified in place by this package; every transform
    builds a new cloud.
    """

    means: np.ndarray           # (N, 3)
    quats: np.ndarray           # (N, 4)
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray              # (N, (L+1)^2, 3)

    def __post_init__(self):
        n = self.means.shape[0]
        if self.means.shape != (n, 3):
            raise ValueError(f"means must be (N, 3), got {self.means.shape}")
        if self.quats.shape != (n, 4):
            raise ValueError(f"quats must be ({n}, 4), got {self.quats.shape}")
        if self.log_scales.shape != (n, 3):
            raise ValueError(f"log_scales must be ({n}, 3), got {self.log_scales.shape}")
        if self.opacity_logits.shape != (n,):
            raise ValueError(f"opacity_logits must be ({n},), got {self.opacity_logits.shape}")
        k = self.sh.shape[1] if self.sh.ndim == 3 else -1
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3 or k not in (1, 4, 9, 16):
            raise ValueError(f"sh must be ({n}, (L+1)^2, 3) with L <= 3, got {self.sh.shape}")

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.means[i],
            rotation_raw=self.quats[i],
            log_scale=self.log_scales[i],
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh[i],
        )

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits.astype(np.float64))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    def select(self, indices) -> "GaussianCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return GaussianCloud(
            means=self.means[idx],
            quats=self.quats[idx],
            log_scales=self.log_scales[idx],
            opacity_logits=self.opacity_logits[idx],
            sh=self.sh[idx],
        )

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(
            means=self.means.astype(dtype),
            quats=self.quats.astype(dtype),
            log_scales=self.log_scales.astype(dtype),
            opacity_logits=self.opacity_logits.astype(dtype),
            sh=self.sh.astype(dtype),
        )

    @classmethod
    def empty(cls, degree: int = 3, dtype=np.float32) -> "GaussianCloud":
        return cls(
            means=np.zeros((0, 3), dtype),
            quats=np.zeros((0, 4), dtype),
            log_scales=np.zeros((0, 3), dtype),
            opacity_logits=np.zeros((0,), dtype),
            sh=np.zeros((0, sh_coeff_count(degree), 3), dtype),
        )

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian], dtype=np.float32) -> "GaussianCloud":
        if not gaussians:
            return cls.empty(dtype=dtype)
        degrees = {g.sh_degree for g in gaussians}
        if len(degrees) != 1:
            raise ValueError(f"mixed SH degrees in cloud: {sorted(degrees)}")
        return cls(
            means=np.array([g.position for g in gaussians], dtype=dtype),
            quats=np.array([g.rotation_raw for g in gaussians], dtype=dtype),
            log_scales=np.array([g.log_scale for g in gaussians], dtype=dtype),
            opacity_logits=np.array([g.opacity_logit for g in gaussians], dtype=dtype),
            sh=np.array([g.sh_coeffs for g in gaussians], dtype=dtype),
        )

    def equals(self, other: "GaussianCloud") -> bool:
        """Exact equality of every stored parameter."""
        return all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.means, self.quats, self.log_scales, self.opacity_logits, self.sh),
                (other.means, other.quats, other.log_scales, other.opacity_logits, other.sh),
            )
        )


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions ``(..., 4)`` in w, x, y, z order."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3), dtype=np.result_type(q, np.float64))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def normalize_quats(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("zero quaternion")
    return q / norm


def covariances(quats: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Vectorized ``R S S^T R^T`` for ``(N, 4)`` quaternions and ``(N, 3)`` log-scales."""
    rot = quat_to_rotmat(normalize_quats(quats))
    m = rot * np.exp(np.asarray(log_scales, dtype=np.float64))[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def covariance(g: Gaussian) -> np.ndarray:
    """3x3 covariance of a single Gaussian.  Raises on a zero quaternion."""
    return covariances(np.asarray(g.rotation_raw)[None], np.asarray(g.log_scale)[None])[0]


def _parse_header(data: bytes) -> tuple[int, int, int]:
    """Return (vertex count, sh degree, payload offset)."""
    if not data.startswith(_PLY_MAGIC):
        raise PlyError("missing 'ply' magic", 0)
    end = data.find(_END_HEADER)
    if end < 0:
        raise PlyError("header has no end_header line", len(data))
    payload_start = end + len(_END_HEADER)

    offset = len(_PLY_MAGIC)
    n_vertices = None
    props: list[str] = []
    saw_format = False
    for raw in data[len(_PLY_MAGIC):end].split(b"\n"):
        line = raw.strip()
        line_offset = offset
        offset += len(raw) + 1
        if not line or line.startswith(b"comment") or line.startswith(b"obj_info"):
            continue
        if line.startswith(b"format"):
            if line != _FORMAT_LINE:
                raise PlyError(f"unsupported format {line.decode(errors='replace')!r}", line_offset)
            saw_format = True
        elif line.startswith(b"element"):
            parts = line.split()
            if len(parts) != 3 or parts[1] != b"vertex" or n_vertices is not None:
                raise PlyError(f"unexpected element line {line.decode(errors='replace')!r}", line_offset)
            try:
                n_vertices = int(parts[2])
            except ValueError:
                raise PlyError("non-integer vertex count", line_offset) from None
            if n_vertices < 0:
                raise PlyError("negative vertex count", line_offset)
        elif line.startswith(b"property"):
            parts = line.split()
            if n_vertices is None:
                raise PlyError("property before element", line_offset)
            if len(parts) != 3 or parts[1] != b"float":
                raise PlyError(f"only 'property float <name>' is supported, got {line.decode(errors='replace')!r}", line_offset)
            props.append(parts[2].decode())
        else:
            raise PlyError(f"unrecognized header line {line.decode(errors='replace')!r}", line_offset)
    if not saw_format:
        raise PlyError("missing format line", len(_PLY_MAGIC))
    if n_vertices is None:
        raise PlyError("missing vertex element", payload_start)

    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    degree = None
    for candidate in range(4):
        if 3 * (sh_coeff_count(candidate) - 1) == n_rest:
            degree = candidate
    if degree is None:
        raise PlyError(f"f_rest count {n_rest} does not match any SH degree <= 3", payload_start)
    expected = property_names(degree)
    if props != expected:
        mismatch = next((i for i, (a, b) in enumerate(zip(props, expected)) if a != b), min(len(props), len(expected)))
        got = props[mismatch] if mismatch < len(props) else "<none>"
        want = expected[mismatch] if mismatch < len(expected) else "<none>"
        raise PlyError(f"property {mismatch} is {got!r}, expected {want!r}", payload_start)
    return n_vertices, degree, payload_start


def read_ply(path) -> GaussianCloud:
    """Load a binary little-endian 3DGS PLY file.

    Raw float32 values are preserved exactly; normals are discarded.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    n, degree, start = _parse_header(data)
    stride = floats_per_gaussian(degree)
    need = start + n * stride * 4
    if len(data) < need:
        raise PlyError(f"truncated payload: expected {n * stride * 4} bytes, found {len(data) - start}", len(data))
    if len(data) > need:
        raise PlyError(f"{len(data) - need} trailing bytes after payload", need)
    table = np.frombuffer(data, dtype="<f4", count=n * stride, offset=start).reshape(n, stride)
    bad = ~np.isfinite(table)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise PlyError(f"non-finite value in vertex {row} property {property_names(degree)[col]!r}",
                       start + int(row * stride + col) * 4)
    table = table.astype(np.float32)

    k = sh_coeff_count(degree)
    col = 6
    dc = table[:, col:col + 3]
    col += 3
    rest = table[:, col:col + 3 * (k - 1)].reshape(n, 3, k - 1)
    col += 3 * (k - 1)
    sh = np.concatenate([dc[:, None, :], rest.transpose(0, 2, 1)], axis=1)
    opacity = table[:, col]
    log_scales = table[:, col + 1:col + 4]
    quats = table[:, col + 4:col + 8]

    zero_q = np.flatnonzero(~np.any(quats != 0, axis=1))
    if zero_q.size:
        row = int(zero_q[0])
        raise PlyError(f"zero quaternion in vertex {row}", start + (row * stride + col + 4) * 4)

    return GaussianCloud(
        means=np.ascontiguousarray(table[:, 0:3]),
        quats=np.ascontiguousarray(quats),
        log_scales=np.ascontiguousarray(log_scales),
        opacity_logits=np.ascontiguousarray(opacity),
        sh=np.ascontiguousarray(sh),
    )


def cloud_to_table(cloud: GaussianCloud) -> np.ndarray:
    n = len(cloud)
    k = cloud.sh.shape[1]
    table = np.zeros((n, floats_per_gaussian(cloud.sh_degree)), dtype="<f4")
    table[:, 0:3] = cloud.means
    col = 6
    table[:, col:col + 3] = cloud.sh[:, 0, :]
    col += 3
    table[:, col:col + 3 * (k - 1)] = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * (k - 1))
    col += 3 * (k - 1)
    table[:, col] = cloud.opacity_logits
    table[:, col + 1:col + 4] = cloud.log_scales
    table[:, col + 4:col + 8] = cloud.quats
    return table


def write_ply(cloud: GaussianCloud, path) -> None:
    """Write ``cloud`` in the layout ``read_ply`` accepts (zero normals).

    Values are cast to float32.  The file is written to a temporary name and
    renamed into place.
    """
    payload = cloud_to_table(cloud).tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(ply_header(len(cloud), cloud.sh_degree))
        fh.write(payload)
    os.replace(tmp, path)
