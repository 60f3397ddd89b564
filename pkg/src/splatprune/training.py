"""Training loop: encode -> refine -> residual update -> rasterize -> loss -> Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import refiner as ref
from .autodiff import Tape, Tensor
from .gaussians import GaussianCloud
from .pruner import PruneConfig, prune
from .rasterizer import Camera, rasterize, rasterize_backward


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10000
    lr: float = 1e-5
    lr_drop_iter: int = 6000
    lr_drop_factor: float = 10.0
    perceptual_weight: float = 0.1
    views_per_step: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.perceptual_weight < 0:
            raise ValueError("perceptual_weight must be >= 0")
        if self.views_per_step < 1:
            raise ValueError("views_per_step must be >= 1")
        if self.lr_drop_factor <= 0:
            raise ValueError("lr_drop_factor must be positive")

    def lr_at(self, iteration: int) -> float:
        return self.lr / self.lr_drop_factor if iteration >= self.lr_drop_iter else self.lr


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainScene:
    cloud: GaussianCloud            # dense cloud; pruned inside train()
    cameras: list[Camera]
    targets: list[np.ndarray]       # one HxWx3 image per camera
    train_views: list[int] | None = None

    def views(self) -> list[int]:
        return list(range(len(self.cameras))) if self.train_views is None else list(self.train_views)


@dataclass
class LogRecord:
    iteration: int
    lr: float
    l1: float
    perc: float
    total: float

    def to_line(self) -> str:
        return f"iter={self.iteration} lr={self.lr!r} l1={self.l1!r} perc={self.perc!r} total={self.total!r}"


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    log: list[LogRecord] = field(default_factory=list)

    def log_text(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.log)


def init_params(enc_cfg: enc.EncoderConfig, ref_cfg: ref.RefinerConfig, seed: int = 0) -> dict[str, np.ndarray]:
    if enc_cfg.feature_width != ref_cfg.feature_width:
        raise ValueError(f"encoder width {enc_cfg.feature_width} != refiner width {ref_cfg.feature_width}")
    seeds = np.random.SeedSequence(seed).generate_state(2)
    return {**enc.init_params(enc_cfg, int(seeds[0])), **ref.init_params(ref_cfg, int(seeds[1]))}


def forward_deltas(cloud: GaussianCloud, params: dict[str, Tensor],
                   enc_cfg: enc.EncoderConfig, ref_cfg: ref.RefinerConfig) -> ref.Deltas:
    encoded = enc.encode(cloud, enc_cfg, params)
    f_p, f_a = ref.refine_features(encoded, ref_cfg, params)
    return ref.delta_heads(f_p, f_a, params)


def render_node(cloud: GaussianCloud, deltas: ref.Deltas, cam: Camera,
                ref_cfg: ref.RefinerConfig, extent: float) -> Tensor:
    """Rasterize ``cloud + deltas`` as a tape op; the backward is the analytic splat gradient."""
    n = len(cloud)
    k = cloud.sh.shape[1]
    sm, sq, ss, so, sc = ref.residual_multipliers(ref_cfg, extent)
    state = {}

    def forward(dm, dq, ds, do, dsh):
        state["cloud"] = ref.apply_deltas(cloud, ref.Deltas(dm, dq, ds, do, dsh), ref_cfg, extent)
        return rasterize(state["cloud"], cam).rgb

    def backward(g):
        gg = rasterize_backward(state["cloud"], cam, g)
        sh = np.zeros((n, 16, 3))
        sh[:, :k, :] = gg.sh
        return (gg.means * sm, gg.quats * sq, gg.log_scales * ss,
                gg.opacity_logits[:, None] * so, sh.reshape(n, 48) * sc)

    return ad.custom_node(deltas.tensors(), forward, backward)


def loss_node(image: Tensor, target: np.ndarray, perceptual_weight: float) -> tuple[Tensor, float, float]:
    parts = {}

    def forward(img):
        l1, perc, total = ref.image_loss(img, target, perceptual_weight)
        parts.update(l1=l1, perc=perc)
        return np.array(total)

    def backward(g):
        return (float(g) * ref.image_loss_grad(image.data, target, perceptual_weight),)

    out = ad.custom_node([image], forward, backward)
    return out, parts["l1"], parts["perc"]


def refine_cloud(cloud: GaussianCloud, params: dict[str, np.ndarray],
                 enc_cfg: enc.EncoderConfig, ref_cfg: ref.RefinerConfig, dtype=np.float32) -> GaussianCloud:
    """Inference: apply the trained network to a (pruned) cloud."""
    if len(cloud) == 0:
        return cloud
    tape = Tape(dtype=dtype)
    bound = {k: tape.constant(v) for k, v in params.items()}
    bound_any = next(iter(bound.values()), None)
    if bound_any is None:
        raise KeyError("empty parameter set")
    deltas = forward_deltas(cloud, bound, enc_cfg, ref_cfg)
    return ref.apply_deltas(cloud, deltas, ref_cfg)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(params):
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            params[name] = (params[name] - update).astype(params[name].dtype)


def step_loss(cloud: GaussianCloud, cams, targets, params: dict[str, np.ndarray],
              enc_cfg, ref_cfg, perceptual_weight: float, dtype=np.float32):
    """One forward/backward over the given views; returns (total, l1, perc, grads by name)."""
    tape = Tape(dtype=dtype)
    bound = enc.bind(tape, params)
    deltas = forward_deltas(cloud, bound, enc_cfg, ref_cfg)
    extent = ref.scene_extent(cloud.means)
    terms, l1s, percs = [], [], []
    for cam, target in zip(cams, targets):
        img = render_node(cloud, deltas, cam, ref_cfg, extent)
        value, l1, perc = loss_node(img, target, perceptual_weight)
        terms.append(value)
        l1s.append(l1)
        percs.append(perc)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    total = ad.scale(total, 1.0 / len(terms))
    value = float(total.data)
    if not np.isfinite(value):
        return value, float(np.mean(l1s)), float(np.mean(percs)), None
    grads = tape.backward(total)
    by_name = {t.name: g for t, g in grads.items()}
    return value, float(np.mean(l1s)), float(np.mean(percs)), by_name


def train(scenes: list[TrainScene], prune_cfg: PruneConfig, enc_cfg: enc.EncoderConfig,
          ref_cfg: ref.RefinerConfig, train_cfg: TrainConfig,
          init: dict[str, np.ndarray] | None = None, log_every: int = 1) -> TrainResult:
    """Fit the encoder/refiner parameters; every iteration samples one scene and distinct training views."""
    if not scenes:
        raise ValueError("train needs at least one scene")
    params = {k: v.copy() for k, v in (init or init_params(enc_cfg, ref_cfg, train_cfg.seed)).items()}
    pruned = [prune(s.cloud, prune_cfg)[0] for s in scenes]
    for s in scenes:
        if len(s.targets) != len(s.cameras):
            raise ValueError("every camera needs a target image")
        if not s.views():
            raise ValueError("scene has no training views")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(train_cfg.seed).spawn(1)[0]))
    opt = Adam(params)
    log: list[LogRecord] = []
    for it in range(train_cfg.iterations):
        si = int(rng.integers(len(scenes))) if len(scenes) > 1 else 0
        scene = scenes[si]
        pool = scene.views()
        picks = rng.choice(len(pool), size=min(train_cfg.views_per_step, len(pool)), replace=False)
        views = [pool[i] for i in sorted(picks.tolist())]
        lr = train_cfg.lr_at(it)
        if len(pruned[si]) == 0:
            continue
        total, l1, perc, grads = step_loss(pruned[si], [scene.cameras[v] for v in views],
                                           [scene.targets[v] for v in views], params,
                                           enc_cfg, ref_cfg, train_cfg.perceptual_weight)
        if grads is None or not all(np.isfinite(g).all() for g in grads.values()):
            raise TrainingDiverged(it, total if grads is None else float("nan"))
        opt.step(params, grads, lr)
        if it % log_every == 0 or it == train_cfg.iterations - 1:
            log.append(LogRecord(it, lr, l1, perc, total))
    return TrainResult(params=params, log=log)
