import math

import numpy as np
import pytest

from oracles import random_cloud
from splatprune import autodiff as ad
from splatprune.autodiff import Tape
from splatprune.encoder import EncoderConfig, bind
from splatprune.encoder import init_params as enc_init
from splatprune.encoder import encode
from splatprune.gaussians import normalize_quats
from splatprune.metrics import ssim
from splatprune.refiner import (
    Deltas, RefinerConfig, apply_deltas, apply_residual, attention_block, grid_clusters, image_loss,
    image_loss_grad, init_params, knn_graph, local_attention, loss, refine_features, scene_extent,
)


def _brute_knn(p, k):
    n = len(p)
    rows = []
    for i in range(n):
        cand = sorted(range(n), key=lambda j: (j != i, float(((p[i] - p[j]) ** 2).sum()), j))
        row = cand[:min(k, n)]
        rows.append(row + [i] * (k - len(row)))
    return np.array(rows)


def test_knn_single_point():
    assert knn_graph(np.zeros((1, 3)), 4).tolist() == [[0, 0, 0, 0]]


def test_knn_collinear():
    p = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    g = knn_graph(p, 2)
    assert g[1].tolist() == [1, 0]
    assert g[0].tolist() == [0, 1] and g[2].tolist() == [2, 1]


def test_knn_matches_brute_force():
    p = np.random.default_rng(0).normal(size=(200, 3))
    assert np.array_equal(knn_graph(p, 16), _brute_knn(p, 16))


def test_knn_duplicates_keep_self_first():
    p = np.zeros((5, 3))
    g = knn_graph(p, 3)
    assert g[:, 0].tolist() == [0, 1, 2, 3, 4]
    assert g[3].tolist() == [3, 0, 1]


def test_knn_invalid():
    with pytest.raises(ValueError):
        knn_graph(np.zeros((0, 3)), 2)
    with pytest.raises(ValueError):
        knn_graph(np.zeros((3, 3)), 0)


def _block_params(c, seed, ffn=12):
    cfg = RefinerConfig(blocks=(1,), feature_width=c, ffn_hidden=ffn, heads=2)
    p = init_params(cfg, seed)
    return {k: v.astype(np.float64) for k, v in p.items() if k.startswith("ref.s0.b0")}


def test_self_only_attention_with_identity_projections_is_identity():
    c = 6
    p = _block_params(c, 0)
    for proj in ("v", "o"):
        p[f"ref.s0.b0.attn.{proj}.w"] = np.eye(c)
        p[f"ref.s0.b0.attn.{proj}.b"] = np.zeros(c)
    x = np.random.default_rng(1).normal(size=(9, c))
    tape = Tape(np.float64)
    out = local_attention(tape.constant(x), knn_graph(x[:, :3], 1), bind(tape, p), "ref.s0.b0", 2)
    assert np.array_equal(out.data, x)


def _ln(h, gamma, beta):
    mu = h.mean(axis=-1, keepdims=True)
    var = ((h - mu) ** 2).mean(axis=-1, keepdims=True)
    return (h - mu) / np.sqrt(var + 1e-5) * gamma + beta


def _block_oracle(x, graph, p, heads):
    n, c = x.shape
    dh = c // heads
    name = "ref.s0.b0"
    lin = lambda v, s: v @ p[f"{name}.{s}.w"] + p[f"{name}.{s}.b"]  # noqa: E731
    q, k, v = lin(x, "attn.q"), lin(x, "attn.k"), lin(x, "attn.v")
    att = np.zeros((n, c))
    for i in range(n):
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = np.array([q[i, sl] @ k[j, sl] for j in graph[i]]) / math.sqrt(dh)
            w = np.exp(scores - scores.max())
            w /= w.sum()
            att[i, sl] = sum(wj * v[j, sl] for wj, j in zip(w, graph[i]))
    y = _ln(x + lin(att, "attn.o"), p[f"{name}.norm1.gamma"], p[f"{name}.norm1.beta"])
    ffn = lin(np.maximum(lin(y, "ffn.fc1"), 0), "ffn.fc2")
    return _ln(y + ffn, p[f"{name}.norm2.gamma"], p[f"{name}.norm2.beta"])


def test_attention_block_matches_oracle():
    rng = np.random.default_rng(2)
    p = _block_params(8, 3)
    p = {k: v + (0.3 * rng.normal(size=v.shape) if "norm" in k else 0) for k, v in p.items()}
    x = rng.normal(size=(6, 8))
    graph = knn_graph(rng.normal(size=(6, 3)), 3)
    tape = Tape(np.float64)
    got = attention_block(tape.constant(x), graph, bind(tape, p), "ref.s0.b0", 2).data
    assert np.allclose(got, _block_oracle(x, graph, p, 2), rtol=1e-10, atol=1e-12)


def test_attention_block_permutation():
    rng = np.random.default_rng(4)
    p = _block_params(8, 5)
    x = rng.normal(size=(20, 8))
    pos = rng.normal(size=(20, 3))
    perm = rng.permutation(20)
    inv = np.argsort(perm)

    def run(xx, graph):
        tape = Tape(np.float64)
        return attention_block(tape.constant(xx), graph, bind(tape, p), "ref.s0.b0", 2).data

    a = run(x, knn_graph(pos, 4))
    b = run(x[perm], inv[knn_graph(pos, 4)[perm]])
    assert np.allclose(b, a[perm], rtol=1e-12, atol=1e-13)


def test_grid_clusters_bound_and_equivariance():
    rng = np.random.default_rng(5)
    p = rng.uniform(-1, 1, (150, 3))
    for ratio in (2.0, 4.0, 10.0):
        ids, centers = grid_clusters(p, ratio)
        assert ids.max() + 1 <= 150 / ratio and len(centers) == ids.max() + 1
        for c in range(len(centers)):
            assert np.allclose(centers[c], p[ids == c].mean(axis=0))
    perm = rng.permutation(150)
    a, _ = grid_clusters(p, 4.0)
    b, _ = grid_clusters(p[perm], 4.0)
    groups = lambda ids, order: sorted(tuple(sorted(order[ids == c])) for c in np.unique(ids))  # noqa: E731
    assert groups(a, np.arange(150)) == groups(b, perm)


def _encoded(n=30, width=16, seed=0):
    ecfg = EncoderConfig(feature_width=width, sh_reduced_dim=4, hidden=8)
    tape = Tape(np.float64)
    cloud = random_cloud(np.random.default_rng(seed), n)
    return cloud, tape, encode(cloud, ecfg, bind(tape, enc_init(ecfg, seed)))


def test_zero_heads_give_zero_feature_updates():
    cfg = RefinerConfig(blocks=(1, 1), knn_k=4, heads=2, feature_width=16, ffn_hidden=8, head_hidden=8)
    cloud, tape, encd = _encoded()
    p = init_params(cfg, 0)
    for k in list(p):
        if k.startswith(("ref.head_p", "ref.head_a")):
            p[k] = np.zeros_like(p[k])
    f_p, f_a = refine_features(encd, cfg, bind(tape, p))
    assert f_p.shape == (30, 16) and not f_p.data.any() and not f_a.data.any()


def test_refine_features_permutation():
    cfg = RefinerConfig(blocks=(1, 1), knn_k=4, heads=2, feature_width=16, ffn_hidden=8, head_hidden=8)
    ecfg = EncoderConfig(feature_width=16, sh_reduced_dim=4, hidden=8)
    params = {**enc_init(ecfg, 1), **init_params(cfg, 2)}
    cloud = random_cloud(np.random.default_rng(3), 40)
    perm = np.random.default_rng(4).permutation(40)

    def run(c):
        tape = Tape(np.float64)
        b = bind(tape, params)
        return refine_features(encode(c, ecfg, b), cfg, b)[0].data

    assert np.allclose(run(cloud.select(perm)), run(cloud)[perm], rtol=1e-10, atol=1e-12)


def _zero_deltas(n):
    return Deltas(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros((n, 1)), np.zeros((n, 48)))


def test_zero_delta_is_identity():
    cfg = RefinerConfig()
    for dtype in (np.float32, np.float64):
        cloud = random_cloud(np.random.default_rng(0), 25, degree=2, dtype=dtype)
        assert apply_deltas(cloud, _zero_deltas(25), cfg).equals(cloud)


def test_unit_mean_delta_moves_one_gaussian_by_scale():
    cfg = RefinerConfig()
    cloud = random_cloud(np.random.default_rng(1), 10, dtype=np.float64)
    d = _zero_deltas(10)
    d.means[4] = (1.0, 0.0, 0.0)
    out = apply_deltas(cloud, d, cfg)
    step = cfg.scale_mean * scene_extent(cloud.means)
    moved = out.means - cloud.means
    assert np.array_equal(np.delete(moved, 4, axis=0), np.zeros((9, 3)))
    assert moved[4, 0] == pytest.approx(step, rel=1e-12) and moved[4, 1] == 0 and moved[4, 2] == 0
    assert np.array_equal(out.quats, cloud.quats) and np.array_equal(out.sh, cloud.sh)


def test_random_deltas_keep_activated_constraints():
    rng = np.random.default_rng(2)
    cfg = RefinerConfig()
    cloud = random_cloud(rng, 10, dtype=np.float32)
    for _ in range(1000):
        d = Deltas(*(rng.normal(scale=50.0, size=s) for s in ((10, 3), (10, 4), (10, 3), (10, 1), (10, 48))))
        out = apply_deltas(cloud, d, cfg)
        assert len(out) == 10
        op = 1.0 / (1.0 + np.exp(-out.opacity_logits.astype(np.float64)))
        assert np.all((op > 0) & (op < 1))
        assert np.all(out.scales > 0)
        assert np.allclose(np.linalg.norm(normalize_quats(out.quats.astype(np.float64)), axis=1), 1.0)


def test_apply_residual_zero_init_is_identity():
    cfg = RefinerConfig(blocks=(1,), feature_width=16, heads=2, knn_k=4, head_hidden=8)
    cloud, tape, encd = _encoded()
    p = init_params(cfg, 3)
    f_p, f_a = refine_features(encd, cfg, bind(tape, p))
    assert apply_residual(cloud, f_p, f_a, p, cfg).equals(cloud)


def test_loss_examples():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.1, 0.8, (16, 16, 3))
    assert loss(a, a) == 0.0
    l1, _, _ = image_loss(a, a + 0.1)
    assert l1 == pytest.approx(0.1, abs=1e-12)
    b = rng.uniform(0, 1, (16, 16, 3))
    assert loss(a, b) == pytest.approx(np.mean(np.abs(a - b)) + 0.1 * (1 - ssim(a, b)), rel=1e-12)
    with pytest.raises(ValueError):
        loss(a, b[:8])


def test_loss_gradient_fd():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(0, 1, (12, 12, 3)), rng.uniform(0, 1, (12, 12, 3))
    g = image_loss_grad(a, b)
    for idx in [(0, 0, 0), (5, 6, 1), (11, 3, 2)]:
        e = np.zeros_like(a)
        e[idx] = 1e-6
        fd = (loss(a + e, b) - loss(a - e, b)) / 2e-6
        assert g[idx] == pytest.approx(fd, rel=1e-5)


@pytest.mark.parametrize("kw", [{"knn_k": 0}, {"blocks": ()}, {"blocks": (2, 0)},
                                {"heads": 3}, {"pool_ratio": 1.0}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        RefinerConfig(**kw)


def test_refined_features_have_finite_gradients():
    cfg = RefinerConfig(blocks=(1, 1), feature_width=16, heads=2, knn_k=4, ffn_hidden=8, head_hidden=8)
    _, tape, encd = _encoded()
    bound = bind(tape, init_params(cfg, 4))
    f_p, f_a = refine_features(encd, cfg, bound)
    grads = tape.backward(ad.add(ad.sum(f_p), ad.sum(f_a)))
    assert all(np.isfinite(g).all() for g in grads.values())
