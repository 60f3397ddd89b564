import numpy as np
import pytest

from splatprune.rasterizer import preprocess, rasterize
from splatprune.synthscene import MixtureSpec, SceneSpec, generate, mixture_cloud


def test_same_seed_bit_identical():
    a, b = generate(SceneSpec(seed=5, n_gaussians=50)), generate(SceneSpec(seed=5, n_gaussians=50))
    assert a.cloud.equals(b.cloud) and a.splits == b.splits
    assert all(np.array_equal(x.R, y.R) and np.array_equal(x.t, y.t) for x, y in zip(a.cameras, b.cameras))
    assert not generate(SceneSpec(seed=6, n_gaussians=50)).cloud.equals(a.cloud)


def test_camera_count_does_not_perturb_gaussians():
    a = generate(SceneSpec(seed=1, n_cameras=10))
    b = generate(SceneSpec(seed=1, n_cameras=30))
    assert a.cloud.equals(b.cloud)


def test_single_gaussian_visible_everywhere():
    scene = generate(SceneSpec(seed=2, n_gaussians=1))
    for cam in scene.cameras:
        assert preprocess(scene.cloud, cam).visible[0]


def test_every_view_has_coverage():
    scene = generate(SceneSpec(seed=3, n_gaussians=500))
    for cam in scene.cameras:
        assert rasterize(scene.cloud, cam).alpha.max() > 0


def test_split_ratio_and_disjoint():
    scene = generate(SceneSpec(seed=4, n_cameras=20))
    assert len(scene.test_indices) == 2
    assert not set(scene.test_indices) & set(scene.train_indices)
    assert sorted(scene.test_indices + scene.train_indices) == list(range(20))


def test_ranges_respected():
    spec = SceneSpec(seed=5, n_gaussians=400)
    c = generate(spec).cloud
    assert np.all(c.means >= -1) and np.all(c.means <= 1)
    assert np.all(c.opacities >= spec.opacity_min - 1e-6) and np.all(c.opacities <= spec.opacity_max + 1e-6)
    assert np.all(c.scales >= spec.scale_min * (1 - 1e-6)) and np.all(c.scales <= spec.scale_max * (1 + 1e-6))


@pytest.mark.parametrize("kw", [
    {"box_min": (0, 0, 0), "box_max": (1, 0, 1)},
    {"n_gaussians": 0},
    {"opacity_min": 0.9, "opacity_max": 0.1},
    {"opacity_max": 1.0},
    {"test_fraction": 1.0},
])
def test_invalid_specs(kw):
    with pytest.raises(ValueError):
        SceneSpec(**kw)


def test_mixture_deterministic_and_labeled():
    a, la = mixture_cloud(MixtureSpec(seed=3))
    b, lb = mixture_cloud(MixtureSpec(seed=3))
    assert a.equals(b) and np.array_equal(la, lb)
    assert (la == 0).sum() == 240 and (la == 1).sum() == 160


def test_mixture_single_member_populations():
    cloud, labels = mixture_cloud(MixtureSpec(n_compact=1, n_diffuse=1))
    assert len(cloud) == 2 and sorted(labels.tolist()) == [0, 1]


def test_mixture_populations_separated():
    spec = MixtureSpec(seed=4)
    cloud, labels = mixture_cloud(spec)
    op = cloud.opacities
    assert op[labels == 0].min() >= spec.compact_opacity[0] - 1e-6
    assert op[labels == 1].max() <= spec.diffuse_opacity[1] + 1e-6
    assert cloud.scales[labels == 0].max() <= spec.compact_scale[1] * (1 + 1e-6)
