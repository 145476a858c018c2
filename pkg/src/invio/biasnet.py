"""Learned IMU bias predictor and its rollout training loss.

A 1-D residual convolutional network maps a window of raw IMU measurements
to one bias estimate (replicated across the window, so sequence-output
architectures stay drop-in compatible).  Training differentiates a Huber
Lie-algebra discrepancy between ground truth and the closed-form rollout of
bias-corrected measurements, and optimizes with Adam.

The same forward/rollout code runs in two modes through a tiny ops
strategy: plain numpy for inference/validation, tape recording for
gradients.  Batch losses are reduced in fixed segment order so training is
deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    DataFormatError,
    InvalidArgumentError,
    TrainingDivergedError,
)
from .inertial import ImuBias, NoiseParams

CHECKPOINT_MAGIC = b"INVIOBN\x01"
CHECKPOINT_VERSION = 1


# -- ops strategies ------------------------------------------------------------


class NumpyOps:
    """Plain numpy evaluation (no gradients)."""

    is_tape = False

    def value(self, x):
        return np.asarray(x)

    def conv1d(self, x, w, b, stride):
        """Same-padded convolution via one im2col matmul per layer."""
        x = np.asarray(x)
        w = np.asarray(w)
        B, c_in, T = x.shape
        c_out, _, k = w.shape
        pad = k // 2
        if pad:
            xp = np.zeros((B, c_in, T + 2 * pad))
            xp[:, :, pad : pad + T] = x
        else:
            xp = x
        t_out = (xp.shape[-1] - k) // stride + 1
        cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
        cols = cols.transpose(0, 1, 3, 2).reshape(B, c_in * k, t_out)
        return w.reshape(c_out, c_in * k) @ cols + np.asarray(b).reshape(-1, 1)

    def add(self, a, b):
        return np.asarray(a) + np.asarray(b)

    def sub(self, a, b):
        return np.asarray(a) - np.asarray(b)

    def mul(self, a, b):
        return np.asarray(a) * np.asarray(b)

    def matmul(self, a, b):
        return np.asarray(a) @ np.asarray(b)

    def transpose(self, a):
        return np.swapaxes(np.asarray(a), -1, -2)

    def reshape(self, a, shape):
        return np.asarray(a).reshape(shape)

    def concat(self, parts, axis=0):
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)

    def slice_(self, a, key):
        return np.asarray(a)[key]

    def where(self, cond, a, b):
        return np.where(cond, a, b)

    def sum_(self, a, axis=None):
        return np.asarray(a).sum(axis=axis)

    def sin(self, a):
        return np.sin(a)

    def sqrt(self, a):
        return np.sqrt(a)

    def reciprocal(self, a):
        return 1.0 / np.asarray(a)

    def relu(self, a):
        return np.maximum(a, 0.0)

    def affine(self, x, scale, shift):
        return np.asarray(x) * np.asarray(scale)[..., :, None] + np.asarray(shift)[
            ..., :, None
        ]

    def hat(self, v):
        from .autodiff import _hat_batch

        return _hat_batch(np.asarray(v))

    def huber(self, x, delta=1.0, per_component=False):
        from .autodiff import _huber_forward

        return _huber_forward((float(delta), bool(per_component)), np.asarray(x))

    def lie_log(self, R, v, p):
        from .autodiff import _lie_log_forward

        return _lie_log_forward(None, np.asarray(R), np.asarray(v), np.asarray(p))


class TapeOps:
    """Tape-recording evaluation; operations on plain arrays constant-fold."""

    is_tape = True

    def __init__(self, tape: ad.Tape):
        self.tape = tape

    @staticmethod
    def _any_node(*xs):
        return any(isinstance(x, ad.Node) for x in xs)

    def value(self, x):
        return x.value if isinstance(x, ad.Node) else np.asarray(x)

    def add(self, a, b):
        return ad.add(a, b) if self._any_node(a, b) else np.asarray(a) + np.asarray(b)

    def sub(self, a, b):
        return ad.sub(a, b) if self._any_node(a, b) else np.asarray(a) - np.asarray(b)

    def mul(self, a, b):
        return ad.mul(a, b) if self._any_node(a, b) else np.asarray(a) * np.asarray(b)

    def matmul(self, a, b):
        return ad.matmul(a, b) if self._any_node(a, b) else np.asarray(a) @ np.asarray(b)

    def transpose(self, a):
        return ad.transpose(a) if self._any_node(a) else np.swapaxes(np.asarray(a), -1, -2)

    def reshape(self, a, shape):
        return ad.reshape(a, shape) if self._any_node(a) else np.asarray(a).reshape(shape)

    def concat(self, parts, axis=0):
        if self._any_node(*parts):
            return ad.concat(parts, axis)
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)

    def slice_(self, a, key):
        return ad.slice_(a, key) if self._any_node(a) else np.asarray(a)[key]

    def where(self, cond, a, b):
        return ad.where(cond, a, b) if self._any_node(a, b) else np.where(cond, a, b)

    def sum_(self, a, axis=None):
        return ad.sum_(a, axis) if self._any_node(a) else np.asarray(a).sum(axis=axis)

    def sin(self, a):
        return ad.sin(a) if self._any_node(a) else np.sin(a)

    def sqrt(self, a):
        return ad.sqrt(a) if self._any_node(a) else np.sqrt(a)

    def reciprocal(self, a):
        return ad.reciprocal(a) if self._any_node(a) else 1.0 / np.asarray(a)

    def relu(self, a):
        return ad.relu(a) if self._any_node(a) else np.maximum(a, 0.0)

    def affine(self, x, scale, shift):
        if self._any_node(x, scale, shift):
            return ad.affine(x, scale, shift)
        return NumpyOps().affine(x, scale, shift)

    def hat(self, v):
        return ad.hat_op(v) if self._any_node(v) else NumpyOps().hat(v)

    def huber(self, x, delta=1.0, per_component=False):
        if self._any_node(x):
            return ad.huber(x, delta, per_component)
        return NumpyOps().huber(x, delta, per_component)

    def lie_log(self, R, v, p):
        if self._any_node(R, v, p):
            return ad.lie_log(R, v, p)
        return NumpyOps().lie_log(R, v, p)


# -- network -------------------------------------------------------------------


@dataclass
class NetConfig:
    """Residual 1-D conv architecture; defaults land near 3e5 parameters."""

    window: int = 200
    in_channels: int = 6
    stem_channels: int = 32
    block_channels: tuple = (32, 64, 64, 128)
    kernel: int = 7

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if self.window < 2**len(self.block_channels):
            raise InvalidArgumentError(
                "window too short for the stride-2 block stack"
            )


@dataclass
class BiasNet:
    """Parameter set plus frozen input-normalization statistics."""

    config: NetConfig
    params: dict
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(6))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(6))

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}


def init_bias_net(cfg: NetConfig | None = None, seed: int = 0) -> BiasNet:
    """He-initialized convolutions, zero head: the fresh net predicts zero bias."""
    cfg = cfg or NetConfig()
    rng = np.random.default_rng(seed)
    p = {}

    def conv_init(name, c_out, c_in, k):
        std = np.sqrt(2.0 / (c_in * k))
        p[f"{name}.w"] = rng.normal(size=(c_out, c_in, k)) * std
        p[f"{name}.b"] = np.zeros(c_out)

    def affine_init(name, c):
        p[f"{name}.scale"] = np.ones(c)
        p[f"{name}.shift"] = np.zeros(c)

    conv_init("stem", cfg.stem_channels, cfg.in_channels, cfg.kernel)
    affine_init("stem.aff", cfg.stem_channels)
    c_in = cfg.stem_channels
    for i, c_out in enumerate(cfg.block_channels, start=1):
        conv_init(f"block{i}.conv1", c_out, c_in, cfg.kernel)
        affine_init(f"block{i}.aff1", c_out)
        conv_init(f"block{i}.conv2", c_out, c_out, cfg.kernel)
        affine_init(f"block{i}.aff2", c_out)
        conv_init(f"block{i}.skip", c_out, c_in, 1)
        affine_init(f"block{i}.skipaff", c_out)
        c_in = c_out
    p["head.w"] = np.zeros((6, c_in))
    p["head.b"] = np.zeros(6)
    return BiasNet(cfg, p)


def _conv1d(ops, x, w, b, stride):
    """Same-padded 1-D convolution as per-tap matmuls (tape-friendly).

    The numpy ops provide a fused im2col path; both paths agree to rounding
    (different summation order only).
    """
    fast = getattr(ops, "conv1d", None)
    if fast is not None:
        return fast(x, w, b, stride)
    xv = ops.value(x)
    B, c_in, T = xv.shape
    k = ops.value(w).shape[-1]
    pad = k // 2
    if pad:
        zeros = np.zeros((B, c_in, pad))
        xp = ops.concat([zeros, x, zeros], axis=-1)
        Tp = T + 2 * pad
    else:
        xp, Tp = x, T
    T_out = (Tp - k) // stride + 1
    acc = None
    for j in range(k):
        xj = ops.slice_(xp, (Ellipsis, slice(j, j + stride * T_out, stride)))
        wj = ops.slice_(w, (Ellipsis, j))
        term = ops.matmul(wj, xj)
        acc = term if acc is None else ops.add(acc, term)
    return ops.add(acc, ops.reshape(b, (-1, 1)))


def _net_forward(cfg: NetConfig, ops, params, x):
    """x: normalized (B, C, L) input; returns (B, 6) bias estimates."""
    h = _conv1d(ops, x, params["stem.w"], params["stem.b"], stride=1)
    h = ops.relu(ops.affine(h, params["stem.aff.scale"], params["stem.aff.shift"]))
    for i in range(1, len(cfg.block_channels) + 1):
        y = _conv1d(ops, h, params[f"block{i}.conv1.w"], params[f"block{i}.conv1.b"], 2)
        y = ops.relu(
            ops.affine(y, params[f"block{i}.aff1.scale"], params[f"block{i}.aff1.shift"])
        )
        y = _conv1d(ops, y, params[f"block{i}.conv2.w"], params[f"block{i}.conv2.b"], 1)
        y = ops.affine(y, params[f"block{i}.aff2.scale"], params[f"block{i}.aff2.shift"])
        s = _conv1d(ops, h, params[f"block{i}.skip.w"], params[f"block{i}.skip.b"], 2)
        s = ops.affine(
            s, params[f"block{i}.skipaff.scale"], params[f"block{i}.skipaff.shift"]
        )
        h = ops.relu(ops.add(y, s))
    T_final = ops.value(h).shape[-1]
    pooled = ops.mul(ops.sum_(h, axis=-1), 1.0 / T_final)  # (B, C)
    return ops.add(ops.matmul(pooled, ops.transpose(params["head.w"])), params["head.b"])


def _normalize_windows(net: BiasNet, windows: np.ndarray) -> np.ndarray:
    std = np.maximum(net.norm_std, 1e-8)
    return (windows - net.norm_mean[None, :, None]) / std[None, :, None]


def predict_bias(net: BiasNet, window) -> list:
    """Bias estimates for a window of IMU samples (length must equal L).

    The network emits a single estimate held constant across the window;
    the returned list has one entry per sample.
    """
    L = net.config.window
    if len(window) != L:
        raise InvalidArgumentError(f"window must have {L} samples, got {len(window)}")
    x = np.empty((1, 6, L))
    x[0, :3, :] = np.array([s.omega for s in window]).T
    x[0, 3:, :] = np.array([s.accel for s in window]).T
    out = _net_forward(net.config, NumpyOps(), net.params, _normalize_windows(net, x))
    b = ImuBias.from_vector(out[0])
    return [ImuBias(b.gyro.copy(), b.accel.copy()) for _ in range(L)]


# -- training segments ----------------------------------------------------------


@dataclass
class TrainSegment:
    """One window: L+1 ground-truth states and the L samples between them."""

    times: np.ndarray  # (N+1,)
    rotations: np.ndarray  # (N+1, 3, 3)
    velocities: np.ndarray  # (N+1, 3)
    positions: np.ndarray  # (N+1, 3)
    omegas: np.ndarray  # (N, 3)
    accels: np.ndarray  # (N, 3)

    def __post_init__(self):
        n = len(self.omegas)
        if not (
            len(self.times) == n + 1
            and len(self.rotations) == n + 1
            and len(self.velocities) == n + 1
            and len(self.positions) == n + 1
            and len(self.accels) == n
        ):
            raise InvalidArgumentError("segment arrays are misaligned")

    @property
    def length(self) -> int:
        return len(self.omegas)


def segments_from_dataset(dataset, window: int, stride: int | None = None) -> list:
    """Cut contiguous (default non-overlapping) windows out of a dataset.

    Requires ground truth aligned with the IMU samples, as the synthetic
    generator and the EuRoC writer produce.
    """
    stride = stride or window
    n = min(len(dataset.imu), len(dataset.ground_truth))
    times = np.array([s.t for s in dataset.imu[:n]])
    omegas = np.array([s.omega for s in dataset.imu[:n]])
    accels = np.array([s.accel for s in dataset.imu[:n]])
    rot = np.array([g[1].rotation for g in dataset.ground_truth[:n]])
    vel = np.array([g[1].velocity for g in dataset.ground_truth[:n]])
    pos = np.array([g[1].position for g in dataset.ground_truth[:n]])
    out = []
    start = 0
    while start + window + 1 <= n:
        sl = slice(start, start + window + 1)
        out.append(
            TrainSegment(
                times[sl],
                rot[sl],
                vel[sl],
                pos[sl],
                omegas[start : start + window],
                accels[start : start + window],
            )
        )
        start += stride
    return out


class _SegmentBatch:
    """Stacked segment arrays for one vectorized rollout."""

    def __init__(self, segments):
        lengths = {s.length for s in segments}
        if len(lengths) != 1:
            raise InvalidArgumentError("batched segments must share one length")
        self.times = np.stack([s.times for s in segments])
        self.rotations = np.stack([s.rotations for s in segments])
        self.velocities = np.stack([s.velocities for s in segments])
        self.positions = np.stack([s.positions for s in segments])
        self.omegas = np.stack([s.omegas for s in segments])
        self.accels = np.stack([s.accels for s in segments])
        self.size = len(segments)
        self.length = segments[0].length

    def input_windows(self) -> np.ndarray:
        return np.concatenate(
            [np.swapaxes(self.omegas, 1, 2), np.swapaxes(self.accels, 1, 2)], axis=1
        )


# -- differentiable rollout ------------------------------------------------------

_TAPE_SMALL_ANGLE = 1e-4


def _gamma_triplet(ops, phi):
    """Batched (gamma0, gamma1, gamma2) of phi (B, 3), both branches composed
    from primitives so gradients stay finite near zero."""
    B = ops.value(phi).shape[0]
    S = ops.hat(phi)
    S2 = ops.matmul(S, S)
    theta_sq = ops.sum_(ops.mul(phi, phi), axis=-1)  # (B,)
    small = ops.value(theta_sq) < _TAPE_SMALL_ANGLE**2
    safe_sq = ops.where(small, np.ones(B), theta_sq)
    theta = ops.sqrt(safe_sq)
    inv = ops.reciprocal(theta)
    inv2 = ops.mul(inv, inv)
    inv3 = ops.mul(inv2, inv)
    inv4 = ops.mul(inv2, inv2)
    s = ops.sin(theta)
    sh = ops.sin(ops.mul(theta, 0.5))
    sh2 = ops.mul(sh, sh)
    a0 = ops.mul(s, inv)
    c1 = ops.mul(ops.mul(sh2, 2.0), inv2)
    c2 = ops.mul(ops.sub(theta, s), inv3)
    two_sh = ops.mul(sh, 2.0)
    c3 = ops.mul(
        ops.mul(ops.sub(theta, two_sh), ops.add(theta, two_sh)), ops.mul(inv4, 0.5)
    )
    a0 = ops.where(small, np.ones(B), a0)
    c1 = ops.where(small, np.full(B, 0.5), c1)
    c2 = ops.where(small, np.full(B, 1.0 / 6.0), c2)
    c3 = ops.where(small, np.full(B, 1.0 / 24.0), c3)

    def lift(c):
        return ops.reshape(c, (B, 1, 1))

    eye = np.broadcast_to(np.eye(3), (B, 3, 3))
    G0 = ops.add(ops.add(eye, ops.mul(lift(a0), S)), ops.mul(lift(c1), S2))
    G1 = ops.add(ops.add(eye, ops.mul(lift(c1), S)), ops.mul(lift(c2), S2))
    G2 = ops.add(ops.add(eye * 0.5, ops.mul(lift(c2), S)), ops.mul(lift(c3), S2))
    return G0, G1, G2


def _pose_inverse(ops, R, v, p):
    Rt = ops.transpose(R)
    return Rt, ops.mul(ops.matmul(Rt, v), -1.0), ops.mul(ops.matmul(Rt, p), -1.0)


def _pose_product(ops, a, b):
    Ra, va, pa = a
    Rb, vb, pb = b
    return (
        ops.matmul(Ra, Rb),
        ops.add(ops.matmul(Ra, vb), va),
        ops.add(ops.matmul(Ra, pb), pa),
    )


def _rollout_losses(ops, bias, batch: _SegmentBatch, cfg, noise: NoiseParams):
    """Per-segment rollout losses (B,) for a constant-per-window bias (B, 6)."""
    B, N = batch.size, batch.length
    g = noise.gravity
    w_vec = np.concatenate(
        [
            np.full(3, cfg.weight_rotation),
            np.full(3, cfg.weight_velocity),
            np.full(3, cfg.weight_position),
        ]
    )
    b_g = ops.slice_(bias, (Ellipsis, slice(0, 3)))  # (B, 3)
    b_a = ops.slice_(bias, (Ellipsis, slice(3, 6)))
    R = batch.rotations[:, 0]
    v = batch.velocities[:, 0][..., None]
    p = batch.positions[:, 0][..., None]
    loss = None
    for k in range(N):
        dt = (batch.times[:, k + 1] - batch.times[:, k])[:, None]  # (B, 1)
        phi = ops.mul(ops.sub(batch.omegas[:, k], b_g), dt)
        G0, G1, G2 = _gamma_triplet(ops, phi)
        a_c = ops.reshape(ops.sub(batch.accels[:, k], b_a), (B, 3, 1))
        dt1 = dt[..., None]  # (B, 1, 1)
        dt2 = dt1 * dt1
        R_prev, v_prev, p_prev = R, v, p
        R = ops.matmul(R_prev, G0)
        v = ops.add(
            ops.add(v_prev, (g[None, :, None] * dt1)),
            ops.mul(ops.matmul(ops.matmul(R_prev, G1), a_c), dt1),
        )
        p = ops.add(
            ops.add(ops.mul(v_prev, dt1), p_prev),
            ops.add(
                0.5 * g[None, :, None] * dt2,
                ops.mul(ops.matmul(ops.matmul(R_prev, G2), a_c), dt2),
            ),
        )

        gt_R = batch.rotations[:, k + 1]
        gt_v = batch.velocities[:, k + 1]
        gt_p = batch.positions[:, k + 1]
        if cfg.loss_kind == "relative":
            # discrepancy of consecutive-state relative poses
            gt_rel = _pose_product(
                ops,
                _pose_inverse(ops, gt_R, gt_v[..., None], gt_p[..., None]),
                (
                    batch.rotations[:, k],
                    batch.velocities[:, k][..., None],
                    batch.positions[:, k][..., None],
                ),
            )
            est_rel_inv = _pose_product(
                ops, _pose_inverse(ops, R_prev, v_prev, p_prev), (R, v, p)
            )
            Re, ve, pe = _pose_product(ops, gt_rel, est_rel_inv)
            xi = ops.lie_log(Re, ops.reshape(ve, (B, 3)), ops.reshape(pe, (B, 3)))
        else:
            # right-invariant discrepancy log(X_gt X_hat^-1)
            Rt = ops.matmul(gt_R, ops.transpose(R))
            vt = ops.sub(gt_v, ops.reshape(ops.matmul(Rt, v), (B, 3)))
            pt = ops.sub(gt_p, ops.reshape(ops.matmul(Rt, p), (B, 3)))
            xi = ops.lie_log(Rt, vt, pt)
        c = ops.huber(
            ops.mul(xi, w_vec), cfg.huber_delta, cfg.huber_per_component
        )  # (B,)
        loss = c if loss is None else ops.add(loss, c)
    return loss


@dataclass
class TrainConfig:
    """Training recipe; defaults follow the published protocol.

    Per-step errors are weighted 1e3 (orientation), 1e2 (position), 1e1
    (velocity) before the Huber norm; Adam runs at learning rate 1e-3.
    """

    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    huber_delta: float = 1.0
    weight_rotation: float = 1e3
    weight_position: float = 1e2
    weight_velocity: float = 1e1
    window: int = 200
    seed: int = 0
    loss_kind: str = "absolute"  # or "relative"
    huber_per_component: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidArgumentError("learning rate must be positive")
        for w in (self.weight_rotation, self.weight_position, self.weight_velocity):
            if w <= 0:
                raise InvalidArgumentError("loss weights must be positive")
        if self.loss_kind not in ("absolute", "relative"):
            raise InvalidArgumentError(f"unknown loss kind {self.loss_kind!r}")


@dataclass
class RolloutLoss:
    value: float
    tape: ad.Tape
    node: ad.Node
    param_nodes: dict


def rollout_loss(net: BiasNet, segment: TrainSegment, cfg: TrainConfig, noise: NoiseParams) -> RolloutLoss:
    """Scalar rollout loss of one segment, recorded on a fresh tape.

    The rollout starts from the segment's ground-truth initial state; errors
    are accumulated from the first propagated step onward.
    """
    from .errors import NumericDomainError

    batch = _SegmentBatch([segment])
    tape = ad.Tape()
    ops = TapeOps(tape)
    param_nodes = {k: tape.leaf(v) for k, v in net.params.items()}
    x = _normalize_windows(net, batch.input_windows())
    bias = _net_forward(net.config, ops, param_nodes, x)
    losses = _rollout_losses(ops, bias, batch, cfg, noise)
    total = ad.sum_(losses)
    if not np.isfinite(total.value):
        # locate the first non-finite per-step contribution for the report
        bad = next(
            (i for i, n in enumerate(tape.nodes) if not np.all(np.isfinite(n.value))),
            None,
        )
        raise NumericDomainError("rollout loss is not finite", step=bad)
    return RolloutLoss(float(total.value), tape, total, param_nodes)


# -- Adam -----------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> AdamState:
    """Standard Adam update with bias-corrected moments (in place)."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name])
        if g.shape != params[name].shape:
            raise InvalidArgumentError(f"gradient shape mismatch for {name}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        m_hat = state.m[name] / (1 - b1**t)
        v_hat = state.v[name] / (1 - b2**t)
        params[name] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return state


# -- training loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    net: BiasNet
    history: list  # [{"epoch", "train_loss", "val_loss"}]


def _dataset_losses(net: BiasNet, segments, cfg, noise, batch_size=16) -> float:
    """Mean per-segment rollout loss, evaluated without a tape."""
    if not segments:
        return float("nan")
    ops = NumpyOps()
    total = 0.0
    for i in range(0, len(segments), batch_size):
        batch = _SegmentBatch(segments[i : i + batch_size])
        x = _normalize_windows(net, batch.input_windows())
        bias = _net_forward(net.config, ops, net.params, x)
        total += float(_rollout_losses(ops, bias, batch, cfg, noise).sum())
    return total / len(segments)


def fit_normalization(net: BiasNet, segments) -> None:
    """Per-channel mean/std over the training split, frozen afterwards."""
    xs = np.concatenate([_SegmentBatch([s]).input_windows() for s in segments], axis=0)
    net.norm_mean = xs.mean(axis=(0, 2))
    net.norm_std = np.maximum(xs.std(axis=(0, 2)), 1e-8)


def train(
    train_segments,
    val_segments,
    cfg: TrainConfig,
    noise: NoiseParams,
    net: BiasNet | None = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Adam training over batched rollout losses.

    Deterministic for a fixed seed; returns the parameters that scored the
    best validation loss (training loss when no validation split is given).
    With zero epochs the initial parameters come back unchanged.
    """
    if not train_segments:
        raise InvalidArgumentError("training dataset is empty")
    if net is None:
        net = init_bias_net(NetConfig(window=cfg.window), seed=cfg.seed)
        fit_normalization(net, train_segments)
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState.init(net.params)
    history = []
    best_loss = np.inf
    best_params = net.copy_params()
    n = len(train_segments)
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        epoch_total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = _SegmentBatch([train_segments[i] for i in idx])
            tape = ad.Tape()
            ops = TapeOps(tape)
            param_nodes = {k: tape.leaf(v) for k, v in net.params.items()}
            x = _normalize_windows(net, batch.input_windows())
            bias = _net_forward(net.config, ops, param_nodes, x)
            losses = _rollout_losses(ops, bias, batch, cfg, noise)
            loss = ad.mul(ad.sum_(losses), 1.0 / batch.size)
            if not np.isfinite(loss.value):
                raise TrainingDivergedError("training loss is not finite", epoch=epoch)
            epoch_total += float(loss.value) * batch.size
            ad.backward(tape, loss)
            grads = {k: node.grad for k, node in param_nodes.items()}
            adam_step(net.params, grads, adam, cfg)
        train_loss = epoch_total / n
        val_loss = _dataset_losses(net, val_segments, cfg, noise)
        select = val_loss if val_segments else train_loss
        if not np.isfinite(select):
            raise TrainingDivergedError("validation loss is not finite", epoch=epoch)
        if select < best_loss:
            best_loss = select
            best_params = net.copy_params()
        history.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
        )
    net.params = best_params
    return TrainResult(net, history)


# -- checkpoint format -------------------------------------------------------------


def save_checkpoint(net: BiasNet, path) -> None:
    """Versioned binary checkpoint; layout documented in docs/formats.md."""
    arch = {
        "window": net.config.window,
        "in_channels": net.config.in_channels,
        "stem_channels": net.config.stem_channels,
        "block_channels": list(net.config.block_channels),
        "kernel": net.config.kernel,
    }
    blob = json.dumps(arch, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.asarray(net.norm_mean, dtype="<f8").tobytes())
        fh.write(np.asarray(net.norm_std, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(net.params)))
        for name in sorted(net.params):
            arr = np.ascontiguousarray(net.params[name], dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> BiasNet:
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise DataFormatError("truncated checkpoint", path=path)
        out = data[off : off + n]
        off += n
        return out

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise DataFormatError("bad checkpoint magic", path=path)
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", path=path)
    (blob_len,) = struct.unpack("<I", take(4))
    arch = json.loads(take(blob_len).decode())
    cfg = NetConfig(
        window=arch["window"],
        in_channels=arch["in_channels"],
        stem_channels=arch["stem_channels"],
        block_channels=tuple(arch["block_channels"]),
        kernel=arch["kernel"],
    )
    norm_mean = np.frombuffer(take(6 * 8), dtype="<f8").copy()
    norm_std = np.frombuffer(take(6 * 8), dtype="<f8").copy()
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(size * 8), dtype="<f8").reshape(shape).copy()
    if off != len(data):
        raise DataFormatError("trailing bytes in checkpoint", path=path)
    return BiasNet(cfg, params, norm_mean, norm_std)
