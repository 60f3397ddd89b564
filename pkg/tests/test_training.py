import numpy as np
import pytest

from splatprune import autodiff as ad
from splatprune.encoder import EncoderConfig
from splatprune.pruner import PruneConfig, prune
from splatprune.rasterizer import boundary_signature, rasterize
from splatprune.refiner import RefinerConfig
from splatprune.synthscene import SceneSpec, generate
from splatprune.training import (
    Adam, TrainConfig, TrainingDiverged, TrainScene, init_params, refine_cloud, step_loss, train,
)

ENC = EncoderConfig(feature_width=16, sh_reduced_dim=4, hidden=16)
REF = RefinerConfig(blocks=(1, 1), knn_k=6, heads=2, feature_width=16, ffn_hidden=16, head_hidden=16)
PRUNE = PruneConfig(0.3, keep_fraction=0.5)


def _scene(seed=0, n=50, size=32, cameras=6):
    sc = generate(SceneSpec(seed=seed, n_gaussians=n, n_cameras=cameras, image_width=size, image_height=size))
    targets = [rasterize(sc.cloud, c).rgb for c in sc.cameras]
    return sc, TrainScene(sc.cloud, sc.cameras, targets, sc.train_indices)


def _train_loss(pruned, ts, params, ref_cfg=REF, enc_cfg=ENC):
    views = ts.views()
    return step_loss(pruned, [ts.cameras[v] for v in views], [ts.targets[v] for v in views],
                     params, enc_cfg, ref_cfg, 0.1)[0]


def test_lr_schedule_defaults():
    cfg = TrainConfig()
    assert cfg.lr_at(0) == 1e-5 and cfg.lr_at(5999) == 1e-5
    assert cfg.lr_at(6000) == pytest.approx(1e-6, rel=1e-12)
    assert cfg.lr_at(9999) == cfg.lr_at(6000)


@pytest.mark.parametrize("kw", [{"iterations": -1}, {"lr": 0.0}, {"perceptual_weight": -0.1},
                                {"views_per_step": 0}, {"lr_drop_factor": 0.0}])
def test_invalid_train_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_zero_iterations_returns_initialization():
    _, ts = _scene()
    init = init_params(ENC, REF, 3)
    res = train([ts], PRUNE, ENC, REF, TrainConfig(iterations=0), init=init)
    assert set(res.params) == set(init) and all(np.array_equal(res.params[k], init[k]) for k in init)
    assert res.log == []


def test_identity_start_render_is_bit_identical():
    sc, _ = _scene(seed=1, n=80)
    pruned, _ = prune(sc.cloud, PRUNE)
    refined = refine_cloud(pruned, init_params(EncoderConfig(), RefinerConfig.desk(), 0),
                           EncoderConfig(), RefinerConfig.desk())
    assert refined.equals(pruned)
    for cam in sc.cameras[:3]:
        assert np.array_equal(rasterize(refined, cam).rgb, rasterize(pruned, cam).rgb)


def test_toy_training_reduces_train_loss():
    _, ts = _scene(seed=2)
    pruned, _ = prune(ts.cloud, PRUNE)
    cfg = TrainConfig(iterations=200, lr=1e-3, seed=2)
    init = init_params(ENC, REF, cfg.seed)
    res = train([ts], PRUNE, ENC, REF, cfg, init=init)
    before, after = _train_loss(pruned, ts, init), _train_loss(pruned, ts, res.params)
    assert after < before
    assert all(np.isfinite(r.total) for r in res.log) and len(res.log) == 200


def test_training_is_deterministic():
    _, ts = _scene(seed=3, n=30, size=24)
    cfg = TrainConfig(iterations=5, lr=1e-3, seed=9)
    a = train([ts], PRUNE, ENC, REF, cfg)
    b = train([ts], PRUNE, ENC, REF, cfg)
    assert a.log_text() == b.log_text()
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_log_lines():
    _, ts = _scene(seed=4, n=20, size=16)
    res = train([ts], PRUNE, ENC, REF, TrainConfig(iterations=4, lr=1e-3), log_every=2)
    lines = res.log_text().splitlines()
    assert [ln.split()[0] for ln in lines] == ["iter=0", "iter=2", "iter=3"]
    assert all(ln.split()[1].startswith("lr=") and ln.split()[-1].startswith("total=") for ln in lines)


def test_divergence_guard_reports_iteration():
    _, ts = _scene(seed=5, n=20, size=16)
    ts.targets = [np.full_like(t, np.nan) for t in ts.targets]
    with pytest.raises(TrainingDiverged) as e:
        train([ts], PRUNE, ENC, REF, TrainConfig(iterations=3, lr=1e-3))
    assert e.value.iteration == 0


def test_every_parameter_gets_finite_nonzero_gradient():
    _, ts = _scene(seed=6, n=40)
    pruned, _ = prune(ts.cloud, PRUNE)
    views = ts.views()[:2]
    cams, tg = [ts.cameras[v] for v in views], [ts.targets[v] for v in views]
    params = init_params(ENC, REF, 0)
    _, _, _, grads = step_loss(pruned, cams, tg, params, ENC, REF, 0.1)
    assert set(grads) == set(params)
    assert all(np.isfinite(g).all() for g in grads.values())
    # zero-initialized output layers block everything upstream until the first update
    assert all(np.abs(grads[k]).max() > 0 for k in grads if ".fc2." in k and k.startswith("ref.delta"))
    Adam(params).step(params, grads, 1e-3)
    _, _, _, grads = step_loss(pruned, cams, tg, params, ENC, REF, 0.1)
    dead = [k for k, g in grads.items() if not np.abs(g).max() > 0]
    assert dead == [] and all(np.isfinite(g).all() for g in grads.values())


def _pipeline_fd(dtype, eps, seed, monkeypatch):
    """Group-wise relative error of the training gradient against central differences."""
    ref_cfg = RefinerConfig(blocks=(1, 1), knn_k=4, heads=2, feature_width=16, ffn_hidden=16,
                            head_hidden=16, zero_init_heads=False, scale_mean=0.05, scale_sh=0.5)
    sc = generate(SceneSpec(seed=seed, n_gaussians=10, n_cameras=4, image_width=20, image_height=20))
    cloud = sc.cloud.astype(dtype)
    rng = np.random.default_rng(seed)
    cams = sc.cameras[:2]
    targets = [np.clip(rasterize(sc.cloud, c).rgb + rng.normal(scale=0.05, size=(20, 20, 3)), 0, 1) for c in cams]
    params = {k: v.astype(dtype) for k, v in init_params(ENC, ref_cfg, seed).items()}
    plain_relu = ad.relu

    def value(p):
        # recombine the float64 loss terms; the tape's own total is rounded to ``dtype``
        _, l1, perc, _ = step_loss(cloud, cams, targets, p, ENC, ref_cfg, 0.1, dtype=dtype)
        return l1 + 0.1 * perc

    def signature(p):
        # every ReLU's active set, rasterizer branch state, and the L1 kink side of every pixel
        signs = []

        def relu(x):
            signs.append((x.data > 0).tobytes())
            return plain_relu(x)

        monkeypatch.setattr(ad, "relu", relu)
        refined = refine_cloud(cloud, p, ENC, ref_cfg, dtype=dtype)
        monkeypatch.setattr(ad, "relu", plain_relu)
        return tuple(signs) + tuple(boundary_signature(refined, c) + np.sign(rasterize(refined, c).rgb - t).tobytes()
                                    for c, t in zip(cams, targets))

    total, _, _, grads = step_loss(cloud, cams, targets, params, ENC, ref_cfg, 0.1, dtype=dtype)
    # one ulp of the network output over the FD step; below this is rounding noise
    resolution = float(np.spacing(dtype(total))) / (2 * eps)
    base = signature(params)
    groups = {}
    for name in sorted(params):
        flat = params[name].reshape(-1)
        an, nu = [], []
        for j in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            plus, minus = flat.copy(), flat.copy()
            plus[j] += dtype(eps)
            minus[j] -= dtype(eps)
            pp = {**params, name: plus.reshape(params[name].shape)}
            pm = {**params, name: minus.reshape(params[name].shape)}
            if signature(pp) != base or signature(pm) != base:
                continue
            an.append(float(grads[name].reshape(-1)[j]))
            nu.append((value(pp) - value(pm)) / (float(plus[j]) - float(minus[j])))
        if an:
            groups[name] = (np.array(an), np.array(nu))
    # relative error per tensor; tensors whose gradient is negligible next to the largest
    # one (or below the FD resolution) are measured against that floor instead
    largest = max(max(np.linalg.norm(a), np.linalg.norm(n)) for a, n in groups.values())
    worst = 0.0
    for a, n in groups.values():
        floor = max(1e-3 * largest, 100 * resolution * np.sqrt(a.size))
        worst = max(worst, float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor)))
    return worst, len(groups)


def test_whole_pipeline_gradient_float64(monkeypatch):
    worst, checked = _pipeline_fd(np.float64, 1e-6, 0, monkeypatch)
    assert checked > 20 and worst < 1e-4


def test_whole_pipeline_gradient_float32(monkeypatch):
    worst, checked = _pipeline_fd(np.float32, 1e-3, 1, monkeypatch)
    assert checked > 20 and worst < 1e-2


def test_multi_scene_training_samples_all_scenes():
    scenes = [_scene(seed=s, n=20, size=16)[1] for s in (7, 8)]
    res = train(scenes, PRUNE, ENC, REF, TrainConfig(iterations=6, lr=1e-3, seed=1))
    assert len(res.log) == 6


def test_width_mismatch_rejected():
    with pytest.raises(ValueError):
        init_params(EncoderConfig(feature_width=32), RefinerConfig(feature_width=64))


def test_refined_render_is_permutation_invariant():
    sc, _ = _scene(seed=9, n=60)
    pruned, _ = prune(sc.cloud, PRUNE)
    ref_cfg = RefinerConfig(blocks=(1, 1), knn_k=6, heads=2, feature_width=16, ffn_hidden=16,
                            head_hidden=16, zero_init_heads=False)
    params = init_params(ENC, ref_cfg, 4)
    perm = np.random.default_rng(0).permutation(len(pruned))
    a = refine_cloud(pruned, params, ENC, ref_cfg, dtype=np.float64)
    b = refine_cloud(pruned.select(perm), params, ENC, ref_cfg, dtype=np.float64)
    assert not a.equals(pruned)
    for cam in sc.cameras[:3]:
        assert np.allclose(rasterize(b, cam).rgb, rasterize(a, cam).rgb, atol=1e-9)
