"""Dual-branch per-Gaussian encoder.

Geometry branch input is ``[mean, unit quaternion, scale]`` (10 values);
appearance branch input is ``[opacity, reduce(sh)]`` where ``reduce`` is a
small MLP over the 48 flattened SH coefficients.  A position encoding of the
mean is added to both branch outputs, the appearance side is turned into a
per-channel softmax gate, and the gate multiplies the geometry side:

    feature = softmax(app(f_a) + pos(mu)) * (geo(f_p) + pos(mu))

Every MLP is ``linear -> layer_norm -> relu -> linear``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .gaussians import Gaussian, GaussianCloud, sigmoid

SH_INPUT = 48
GEOMETRY_INPUT = 10
VARIANTS = ("geometry", "geometry_pe", "dual", "dual_pe")
GATE_AXES = ("channels", "gaussians")

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class EncoderConfig:
    feature_width: int = 64
    sh_reduced_dim: int = 16
    hidden: int = 64
    # geometry: geo(f_p); geometry_pe: geo(f_p) + pos; dual: softmax(app) * geo; dual_pe: full model
    variant: str = "dual_pe"
    gate_axis: str = "channels"
    positional_encoding: str = "mlp"

    def __post_init__(self):
        if self.feature_width <= 0 or self.hidden <= 0:
            raise ValueError("widths must be positive")
        if not 0 < self.sh_reduced_dim <= SH_INPUT:
            raise ValueError(f"sh_reduced_dim must be in (0, {SH_INPUT}]")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.gate_axis not in GATE_AXES:
            raise ValueError(f"gate_axis must be one of {GATE_AXES}")
        if self.positional_encoding != "mlp":
            raise ValueError("only the 'mlp' positional encoding is implemented")


def init_linear(params: Params, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
                zero: bool = False) -> None:
    bound = np.sqrt(1.0 / fan_in)
    if zero:
        params[f"{name}.w"] = np.zeros((fan_in, fan_out), np.float32)
        params[f"{name}.b"] = np.zeros(fan_out, np.float32)
    else:
        params[f"{name}.w"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32)
        params[f"{name}.b"] = rng.uniform(-bound, bound, fan_out).astype(np.float32)


def init_layer_norm(params: Params, name: str, width: int) -> None:
    params[f"{name}.gamma"] = np.ones(width, np.float32)
    params[f"{name}.beta"] = np.zeros(width, np.float32)


def init_mlp(params: Params, name: str, fan_in: int, hidden: int, fan_out: int,
             rng: np.random.Generator, zero_last: bool = False) -> None:
    init_linear(params, f"{name}.fc1", fan_in, hidden, rng)
    init_layer_norm(params, f"{name}.norm", hidden)
    init_linear(params, f"{name}.fc2", hidden, fan_out, rng, zero=zero_last)


def linear(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    return ad.add(ad.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def mlp(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    h = linear(x, p, f"{name}.fc1")
    h = ad.layer_norm(h, p[f"{name}.norm.gamma"], p[f"{name}.norm.beta"])
    return linear(ad.relu(h), p, f"{name}.fc2")


def init_params(cfg: EncoderConfig, seed: int = 0) -> Params:
    rng = np.random.Generator(np.random.PCG64(seed))
    params: Params = {}
    c, h = cfg.feature_width, cfg.hidden
    init_mlp(params, "enc.sh_reduce", SH_INPUT, h, cfg.sh_reduced_dim, rng)
    init_mlp(params, "enc.geometry", GEOMETRY_INPUT, h, c, rng)
    init_mlp(params, "enc.appearance", 1 + cfg.sh_reduced_dim, h, c, rng)
    init_mlp(params, "enc.position", 3, h, c, rng)
    return params


def bind(tape: Tape, params: Params) -> dict[str, Tensor]:
    return {name: tape.leaf(value, name=name) for name, value in params.items()}


def branch_features(g: Gaussian) -> tuple[np.ndarray, np.ndarray]:
    """Geometry input (10,) and appearance input (49,) of a single Gaussian."""
    cloud = GaussianCloud.from_gaussians([g], dtype=np.float64)
    f_p, a_in = branch_inputs(cloud)
    return f_p[0], a_in[0]


def branch_inputs(cloud: GaussianCloud) -> tuple[np.ndarray, np.ndarray]:
    """``(N, 10)`` geometry inputs and ``(N, 49)`` appearance inputs (SH zero-padded to degree 3)."""
    n = len(cloud)
    q = np.asarray(cloud.quats, dtype=np.float64)
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    f_p = np.concatenate([np.asarray(cloud.means, np.float64), qn, cloud.scales], axis=1)
    sh = np.zeros((n, 16, 3))
    sh[:, :cloud.sh.shape[1], :] = cloud.sh
    a_in = np.concatenate([sigmoid(np.asarray(cloud.opacity_logits, np.float64))[:, None],
                           sh.reshape(n, SH_INPUT)], axis=1)
    return f_p, a_in


@dataclass
class EncodedFeatures:
    features: Tensor      # (N, C)
    gate: Tensor | None   # (N, C) softmax weights, when the variant has a gate
    f_p: np.ndarray       # (N, 10) geometry branch input
    f_a: Tensor           # (N, 1 + d_a) appearance branch input after SH reduction
    positions: np.ndarray


def encode(cloud: GaussianCloud, cfg: EncoderConfig, params: dict[str, Tensor]) -> EncodedFeatures:
    required = ("enc.geometry.fc1.w", "enc.position.fc1.w", "enc.appearance.fc1.w", "enc.sh_reduce.fc1.w")
    missing = [k for k in required if k not in params]
    if missing:
        raise KeyError(f"encoder parameters not initialized: {missing}")
    tape = params["enc.geometry.fc1.w"].tape
    f_p_np, a_np = branch_inputs(cloud)
    f_p = tape.constant(f_p_np)
    opacity = tape.constant(a_np[:, :1])
    sh = tape.constant(a_np[:, 1:])

    reduced = mlp(sh, params, "enc.sh_reduce")
    f_a = ad.concat([opacity, reduced], axis=1)
    geo = mlp(f_p, params, "enc.geometry")
    gate = None
    variant = cfg.variant
    if variant in ("geometry_pe", "dual_pe"):
        delta = mlp(tape.constant(np.asarray(cloud.means, np.float64)), params, "enc.position")
        geo = ad.add(geo, delta)
    if variant in ("dual", "dual_pe"):
        app = mlp(f_a, params, "enc.appearance")
        if variant == "dual_pe":
            app = ad.add(app, delta)
        gate = ad.softmax(app, axis=1 if cfg.gate_axis == "channels" else 0)
        features = ad.mul(gate, geo)
    else:
        features = geo
    return EncodedFeatures(features=features, gate=gate, f_p=f_p_np, f_a=f_a,
                           positions=np.asarray(cloud.means, np.float64))
