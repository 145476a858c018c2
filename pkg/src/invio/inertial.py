"""Discrete IMU propagation and invariant covariance evolution.

The state propagates in closed form under piecewise-constant corrected
measurements; the covariance transition matrix is state-independent (it
never reads the pose estimate), which is the property the whole filter
design leans on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, StateCorruptionError
from .liegroup import ExtendedPose, adjoint, gamma1, gamma2, hat, so3_exp

COV_SYM_TOL = 1e-10
COV_EIG_TOL = -1e-10


@dataclass
class ImuSample:
    """One timestamped gyro/accel reading (rad/s, m/s^2)."""

    t: float
    omega: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)


@dataclass
class ImuBias:
    """Gyro/accel bias pair, assumed constant over each sample interval."""

    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)

    @classmethod
    def zero(cls) -> "ImuBias":
        return cls()

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])

    @classmethod
    def from_vector(cls, b) -> "ImuBias":
        b = np.asarray(b, dtype=float).reshape(6)
        return cls(b[:3], b[3:6])


@dataclass
class NoiseParams:
    """Continuous-time IMU noise densities plus the gravity vector.

    Defaults are the EuRoC column of the noise table:
    sigma_g=1e-2 rad/s/sqrt(Hz), sigma_bg=8e-4, sigma_a=3e-2, sigma_ba=2e-4.
    ``sigma_v`` is the velocity pseudo-noise density of the propagation
    noise vector; it is not tabulated anywhere, so it defaults to zero and
    is exposed as configuration.
    """

    sigma_g: float = 1e-2
    sigma_bg: float = 8e-4
    sigma_a: float = 3e-2
    sigma_ba: float = 2e-4
    sigma_v: float = 0.0
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        for name in ("sigma_g", "sigma_bg", "sigma_a", "sigma_ba", "sigma_v"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")

    def propagation_covariance(self) -> np.ndarray:
        """diag(sigma_g^2 I, sigma_a^2 I, sigma_v^2 I) in tangent ordering."""
        d = np.concatenate(
            [
                np.full(3, self.sigma_g**2),
                np.full(3, self.sigma_a**2),
                np.full(3, self.sigma_v**2),
            ]
        )
        return np.diag(d)


def validate_covariance9(P: np.ndarray) -> np.ndarray:
    """Check 9x9 symmetry and positive semi-definiteness."""
    P = np.asarray(P, dtype=float)
    if P.shape != (9, 9):
        raise InvalidArgumentError(f"covariance must be 9x9, got {P.shape}")
    scale = max(1.0, float(np.abs(P).max()))
    if float(np.abs(P - P.T).max()) > COV_SYM_TOL * scale:
        raise StateCorruptionError("covariance is not symmetric")
    w = np.linalg.eigvalsh((P + P.T) / 2.0)
    if w.min() < COV_EIG_TOL * scale:
        raise StateCorruptionError(f"covariance has negative eigenvalue {w.min():.3e}")
    return P


def propagate_state(
    X: ExtendedPose,
    u: ImuSample,
    b: ImuBias,
    dt: float,
    noise: NoiseParams,
) -> ExtendedPose:
    """One closed-form propagation step with bias-corrected measurements.

    Exact for measurements held constant over the interval; gravity comes
    from ``noise.gravity``.
    """
    if not dt > 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    w = u.omega - b.gyro
    a = u.accel - b.accel
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(a))):
        raise InvalidArgumentError("bias-corrected rates are not finite")
    g = noise.gravity
    phi = w * dt
    R = X.rotation
    R_next = R @ so3_exp(phi)
    v_next = X.velocity + g * dt + R @ gamma1(phi) @ a * dt
    p_next = X.position + X.velocity * dt + 0.5 * g * dt**2 + R @ gamma2(phi) @ a * dt**2
    return ExtendedPose(R_next, v_next, p_next)


def error_dynamics_matrix(noise: NoiseParams) -> np.ndarray:
    """Continuous-time invariant error dynamics matrix (state-independent)."""
    A = np.zeros((9, 9))
    A[3:6, 0:3] = hat(noise.gravity)
    A[6:9, 3:6] = np.eye(3)
    return A


def invariant_transition(dt: float, noise: NoiseParams) -> np.ndarray:
    """Exact matrix exponential of the error dynamics over dt.

    The dynamics matrix is nilpotent (A^3 = 0), so
    I + A dt + A^2 dt^2 / 2 is the full exponential.  Takes no pose
    argument: the transition is independent of any state estimate.
    """
    if dt < 0:
        raise InvalidArgumentError(f"dt must be non-negative, got {dt}")
    A = error_dynamics_matrix(noise)
    return np.eye(9) + A * dt + (A @ A) * (dt**2 / 2.0)


def propagate_covariance(
    P: np.ndarray,
    X_hat: ExtendedPose,
    dt: float,
    noise: NoiseParams,
) -> np.ndarray:
    """Discrete covariance propagation on right-invariant errors.

    P' = Phi P Phi^T + Phi Ad_X Cov(n) Ad_X^T Phi^T dt, symmetrized.
    """
    P = validate_covariance9(P)
    if not dt > 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    Phi = invariant_transition(dt, noise)
    G = adjoint(X_hat)
    Q = G @ noise.propagation_covariance() @ G.T
    P_next = Phi @ P @ Phi.T + Phi @ Q @ Phi.T * dt
    return (P_next + P_next.T) / 2.0


def relative_increments(
    rotations,
    samples,
    biases,
    v_start: np.ndarray,
    noise: NoiseParams,
):
    """Velocity/position increments accumulated over a sample span.

    Sums the per-interval world-frame specific-force contributions using the
    supplied rotation sequence.  Returns ``(dv, dp, dp_free)`` where
    ``dp_free`` omits the initial-velocity term (the variant used when the
    initial velocity is unobservable).
    """
    n = len(rotations)
    if not (len(samples) == n and len(biases) == n):
        raise InvalidArgumentError(
            f"sequence lengths differ: rotations {n}, samples {len(samples)}, "
            f"biases {len(biases)}"
        )
    if n < 2:
        raise InvalidArgumentError("need at least two samples")
    v_start = np.asarray(v_start, dtype=float).reshape(3)
    g = noise.gravity
    dv = np.zeros(3)
    dp = np.zeros(3)
    dp_free = np.zeros(3)
    for k in range(n - 1):
        dt = samples[k + 1].t - samples[k].t
        if not dt > 0:
            raise InvalidArgumentError(f"non-increasing timestamp at index {k}")
        f_world = rotations[k] @ (samples[k].accel - biases[k].accel) + g
        dp += (v_start + dv) * dt + 0.5 * f_world * dt**2
        dp_free += dv * dt + 0.5 * f_world * dt**2
        dv += f_world * dt
    return dv, dp, dp_free
