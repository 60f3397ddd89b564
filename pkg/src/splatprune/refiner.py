"""Local-attention refinement network and residual parameter update.

Encoded per-Gaussian features pass through stages of k-NN multi-head
attention blocks.  Stage 0 runs on the Gaussians themselves; every later
stage runs on a voxel-grid pooling of the previous one and is unpooled back
(nearest cell) and added as a skip connection.  Two linear heads split the
trunk into a geometry feature and an appearance feature, and two small MLPs
turn those into raw-parameter deltas:

    geometry   -> d_mean (3), d_quat (4), d_log_scale (3)
    appearance -> d_opacity_logit (1), d_sh (48)

The delta MLPs end in zero-initialized layers, so an untrained network
returns the input cloud unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .encoder import EncodedFeatures, init_layer_norm, init_linear, init_mlp, linear, mlp
from .gaussians import GaussianCloud
from .metrics import ssim, ssim_grad

SH_FLAT = 48
GEOMETRY_DELTA = 10
APPEARANCE_DELTA = 1 + SH_FLAT


@dataclass(frozen=True)
class RefinerConfig:
    blocks: tuple[int, ...] = (2, 2, 2, 4, 2)
    pool_ratio: float = 4.0
    knn_k: int = 16
    heads: int = 4
    feature_width: int = 64
    ffn_hidden: int = 128
    head_hidden: int = 64
    scale_mean: float = 0.01
    scale_quat: float = 0.01
    scale_log_scale: float = 0.01
    scale_opacity: float = 0.1
    scale_sh: float = 0.1
    zero_init_heads: bool = True

    def __post_init__(self):
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if not self.blocks or any(b < 1 for b in self.blocks):
            raise ValueError("every stage needs at least one block")
        if self.heads < 1 or self.feature_width % self.heads:
            raise ValueError(f"feature_width {self.feature_width} is not divisible by heads {self.heads}")
        if self.pool_ratio <= 1.0:
            raise ValueError("pool_ratio must be > 1")

    @classmethod
    def desk(cls, **kw) -> "RefinerConfig":
        return cls(blocks=(2, 2), **kw)


def knn_graph(positions: np.ndarray, k: int) -> np.ndarray:
    """``(N, k)`` neighbor indices, nearest first; self is always column 0, ties go to the lower index."""
    p = np.asarray(positions, dtype=np.float64)
    n = p.shape[0]
    if n < 1:
        raise ValueError("knn_graph needs at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")
    kk = min(k, n)
    d2 = ((p[:, None, :] - p[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, -1.0)
    idx = np.broadcast_to(np.arange(n), (n, n))
    order = np.lexsort((idx, d2), axis=1)[:, :kk]
    if kk < k:
        order = np.concatenate([order, np.repeat(order[:, :1], k - kk, axis=1)], axis=1)
    return order.astype(np.int64)


def grid_clusters(positions: np.ndarray, ratio: float) -> tuple[np.ndarray, np.ndarray]:
    """Voxel-grid pooling: per-point cluster ids and cluster-mean positions.

    The cell size is the smallest (found by bisection) whose occupied-cell
    count is at most ``N / ratio``.
    """
    p = np.asarray(positions, dtype=np.float64)
    n = p.shape[0]
    target = max(1, int(n / ratio))
    lo_corner = p.min(axis=0)
    span = float((p.max(axis=0) - lo_corner).max())

    def cells(size):
        keys = np.floor((p - lo_corner) / size).astype(np.int64)
        _, inv = np.unique(keys, axis=0, return_inverse=True)
        return inv.reshape(-1)

    if span == 0.0 or target == 1:
        inv = np.zeros(n, dtype=np.int64)
    else:
        lo, hi = span * 1e-6, span * 1.0001
        for _ in range(48):
            mid = math.sqrt(lo * hi)
            if cells(mid).max() + 1 <= target:
                hi = mid
            else:
                lo = mid
        inv = cells(hi)
    m = int(inv.max()) + 1
    counts = np.bincount(inv, minlength=m).astype(np.float64)
    centers = np.zeros((m, 3))
    np.add.at(centers, inv, p)
    return inv, centers / counts[:, None]


def _stage_name(s: int, b: int) -> str:
    return f"ref.s{s}.b{b}"


def init_params(cfg: RefinerConfig, seed: int = 1) -> dict[str, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(seed))
    c = cfg.feature_width
    params: dict[str, np.ndarray] = {}
    for s, count in enumerate(cfg.blocks):
        for b in range(count):
            name = _stage_name(s, b)
            for proj in ("q", "k", "v", "o"):
                init_linear(params, f"{name}.attn.{proj}", c, c, rng)
            init_layer_norm(params, f"{name}.norm1", c)
            init_linear(params, f"{name}.ffn.fc1", c, cfg.ffn_hidden, rng)
            init_linear(params, f"{name}.ffn.fc2", cfg.ffn_hidden, c, rng)
            init_layer_norm(params, f"{name}.norm2", c)
    init_linear(params, "ref.head_p", c, c, rng)
    init_linear(params, "ref.head_a", c, c, rng)
    init_mlp(params, "ref.delta_p", c, cfg.head_hidden, GEOMETRY_DELTA, rng, zero_last=cfg.zero_init_heads)
    init_mlp(params, "ref.delta_a", c, cfg.head_hidden, APPEARANCE_DELTA, rng, zero_last=cfg.zero_init_heads)
    return params


def local_attention(x: Tensor, graph: np.ndarray, params: dict[str, Tensor], name: str, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over each row's graph neighbors, output-projected."""
    n, c = x.shape
    k = graph.shape[1]
    dh = c // heads
    q = linear(x, params, f"{name}.attn.q")
    kv_k = linear(x, params, f"{name}.attn.k")
    kv_v = linear(x, params, f"{name}.attn.v")
    flat = graph.reshape(-1)
    q4 = ad.transpose(ad.reshape(q, (n, 1, heads, dh)), (0, 2, 1, 3))                      # N,H,1,dh
    k4 = ad.transpose(ad.reshape(ad.gather(kv_k, flat), (n, k, heads, dh)), (0, 2, 3, 1))  # N,H,dh,k
    v4 = ad.transpose(ad.reshape(ad.gather(kv_v, flat), (n, k, heads, dh)), (0, 2, 1, 3))  # N,H,k,dh
    att = ad.softmax(ad.scale(ad.matmul(q4, k4), 1.0 / math.sqrt(dh)), axis=-1)
    heads_out = ad.reshape(ad.transpose(ad.matmul(att, v4), (0, 2, 1, 3)), (n, c))
    return linear(heads_out, params, f"{name}.attn.o")


def attention_block(x: Tensor, graph: np.ndarray, params: dict[str, Tensor], name: str, heads: int) -> Tensor:
    """Post-norm block: ``x = LN(x + MHA_knn(x)); x = LN(x + FFN(x))``."""
    x = ad.layer_norm(ad.add(x, local_attention(x, graph, params, name, heads)),
                      params[f"{name}.norm1.gamma"], params[f"{name}.norm1.beta"])
    h = linear(ad.relu(linear(x, params, f"{name}.ffn.fc1")), params, f"{name}.ffn.fc2")
    return ad.layer_norm(ad.add(x, h), params[f"{name}.norm2.gamma"], params[f"{name}.norm2.beta"])


def _pool(x: Tensor, clusters: np.ndarray, m: int) -> Tensor:
    counts = np.bincount(clusters, minlength=m).astype(np.float64)
    inv = np.repeat((1.0 / counts)[:, None], x.shape[1], axis=1)
    return ad.mul(ad.scatter_add(x, clusters, m), x.tape.constant(inv))


def refine_features(encoded: EncodedFeatures, cfg: RefinerConfig,
                    params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Trunk of attention stages followed by the geometry/appearance feature heads."""
    x = encoded.features
    if x.shape[1] != cfg.feature_width:
        raise ValueError(f"feature width {x.shape[1]} != refiner width {cfg.feature_width}")
    positions = encoded.positions
    skips, links = [], []
    for s, count in enumerate(cfg.blocks):
        if s > 0:
            clusters, positions = grid_clusters(positions, cfg.pool_ratio)
            links.append(clusters)
            x = _pool(x, clusters, positions.shape[0])
        graph = knn_graph(positions, cfg.knn_k)
        for b in range(count):
            x = attention_block(x, graph, params, _stage_name(s, b), cfg.heads)
        skips.append(x)
    for s in range(len(cfg.blocks) - 1, 0, -1):
        x = ad.add(skips[s - 1], ad.gather(x, links[s - 1]))
    return linear(x, params, "ref.head_p"), linear(x, params, "ref.head_a")


@dataclass
class Deltas:
    """Raw-parameter updates, one row per Gaussian (Tensors or arrays)."""
    means: object
    quats: object
    log_scales: object
    opacity_logits: object
    sh: object

    def numpy(self) -> "Deltas":
        f = lambda t: t.data if isinstance(t, Tensor) else np.asarray(t)  # noqa: E731
        return Deltas(f(self.means), f(self.quats), f(self.log_scales), f(self.opacity_logits), f(self.sh))

    def tensors(self) -> list[Tensor]:
        return [self.means, self.quats, self.log_scales, self.opacity_logits, self.sh]


def delta_heads(f_p: Tensor, f_a: Tensor, params: dict[str, Tensor]) -> Deltas:
    dp = mlp(f_p, params, "ref.delta_p")
    da = mlp(f_a, params, "ref.delta_a")
    return Deltas(means=dp[:, 0:3], quats=dp[:, 3:7], log_scales=dp[:, 7:10],
                  opacity_logits=da[:, 0:1], sh=da[:, 1:])


def scene_extent(means: np.ndarray) -> float:
    """Largest bounding-box side of the means; 1.0 for degenerate clouds."""
    if len(means) == 0:
        return 1.0
    m = np.asarray(means, dtype=np.float64)
    span = float((m.max(axis=0) - m.min(axis=0)).max())
    return span if span > 0 else 1.0


def residual_multipliers(cfg: RefinerConfig, extent: float) -> tuple[float, float, float, float, float]:
    return (cfg.scale_mean * extent, cfg.scale_quat, cfg.scale_log_scale, cfg.scale_opacity, cfg.scale_sh)


def apply_deltas(cloud: GaussianCloud, deltas: Deltas, cfg: RefinerConfig,
                 extent: float | None = None) -> GaussianCloud:
    """Add scaled deltas to the raw parameters, in the cloud's own dtype.

    Quaternions are stored unnormalized (every consumer normalizes), so a
    zero delta returns bit-identical arrays.
    """
    d = deltas.numpy()
    n = len(cloud)
    dt = cloud.means.dtype
    if extent is None:
        extent = scene_extent(cloud.means)
    sm, sq, ss, so, sc = (dt.type(v) for v in residual_multipliers(cfg, extent))
    k = cloud.sh.shape[1]
    sh_delta = np.asarray(d.sh, dtype=dt).reshape(n, 16, 3)[:, :k, :]
    quats = cloud.quats + sq * np.asarray(d.quats, dtype=dt)
    bad = np.linalg.norm(quats.astype(np.float64), axis=1) < 1e-12
    if bad.any():
        quats[bad] = cloud.quats[bad]
    return GaussianCloud(
        means=cloud.means + sm * np.asarray(d.means, dtype=dt),
        quats=quats,
        log_scales=cloud.log_scales + ss * np.asarray(d.log_scales, dtype=dt),
        opacity_logits=cloud.opacity_logits + so * np.asarray(d.opacity_logits, dtype=dt).reshape(n),
        sh=cloud.sh + sc * sh_delta,
    )


def apply_residual(cloud: GaussianCloud, f_p, f_a, params: dict[str, np.ndarray],
                   cfg: RefinerConfig, extent: float | None = None) -> GaussianCloud:
    """Run the delta heads on refined features and update ``cloud``."""
    tape = Tape()
    bound = {k: tape.constant(v) for k, v in params.items() if k.startswith("ref.delta")}
    as_t = lambda f: f if isinstance(f, Tensor) and f.tape is tape else tape.constant(getattr(f, "data", f))  # noqa: E731
    return apply_deltas(cloud, delta_heads(as_t(f_p), as_t(f_a), bound), cfg, extent)


def image_loss(render: np.ndarray, target: np.ndarray, perceptual_weight: float = 0.1) -> tuple[float, float, float]:
    """``(l1, 1 - ssim, total)`` with ``total = l1 + w * (1 - ssim)``."""
    r = np.asarray(render, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"render {r.shape} and target {t.shape} differ in shape")
    l1 = float(np.mean(np.abs(r - t)))
    perc = 1.0 - ssim(r, t)
    return l1, perc, l1 + perceptual_weight * perc


def loss(render, target: np.ndarray, perceptual_weight: float = 0.1) -> float:
    rgb = render.rgb if hasattr(render, "rgb") else render
    return image_loss(rgb, target, perceptual_weight)[2]


def image_loss_grad(render: np.ndarray, target: np.ndarray, perceptual_weight: float = 0.1) -> np.ndarray:
    r = np.asarray(render, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    g = np.sign(r - t) / r.size
    if perceptual_weight:
        g = g - perceptual_weight * ssim_grad(r, t)
    return g
