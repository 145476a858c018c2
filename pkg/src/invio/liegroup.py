"""SO(3) and SE2(3) group/algebra operators.

An extended pose packs rotation, velocity and position into one 5x5 group
element.  Everything here is a pure function over numpy arrays in double
precision; tolerances are absolute Frobenius/2-norm.

Conventions:
 * rotations are 3x3 matrices, re-orthonormalized (polar projection) when
   drift exceeds ``ROT_TOL``;
 * the 9-vector tangent ordering is (rotation, velocity, position);
 * the logarithm returns the principal branch; at a half-turn the axis sign
   is fixed by making its largest-magnitude component positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

# Structural small-angle threshold: below this the Taylor branches are used.
# Both branches agree to better than 1e-10 at the switch point.
SMALL_ANGLE = 1e-5

# Rotation matrices are considered valid within this Frobenius tolerance and
# re-orthonormalized once they drift past it.
ROT_TOL = 1e-9

# Inputs worse than this are rejected instead of repaired.
ROT_REJECT_TOL = 1e-6


def _check_finite(x, name):
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError(f"{name} contains non-finite values")


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: hat(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def vee(M: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat` (exact on skew-symmetric input)."""
    M = np.asarray(M, dtype=float)
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def rotation_deviation(R: np.ndarray) -> float:
    """Frobenius distance of R^T R from the identity."""
    R = np.asarray(R, dtype=float)
    return float(np.linalg.norm(R.T @ R - np.eye(3)))


def project_rotation(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar factor via SVD, det forced to +1)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def validate_rotation(R: np.ndarray, tol: float = ROT_REJECT_TOL) -> np.ndarray:
    """Check orthonormality/determinant; repair small drift, reject garbage."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise InvalidArgumentError(f"rotation must be 3x3, got {R.shape}")
    _check_finite(R, "rotation")
    dev = rotation_deviation(R)
    if dev > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidArgumentError(
            f"matrix is not a rotation (orthonormality deviation {dev:.3e})"
        )
    if dev > ROT_TOL:
        R = project_rotation(R)
    return R


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rotation matrix for a rotation vector (Rodrigues formula).

    Uses a second-order Taylor expansion below the small-angle threshold.
    """
    phi = np.asarray(phi, dtype=float)
    _check_finite(phi, "rotation vector")
    S = hat(phi)
    theta = float(np.linalg.norm(phi))
    if theta < SMALL_ANGLE:
        return np.eye(3) + S + S @ S / 2.0
    # 2*sin^2(t/2) == 1 - cos(t) without cancellation
    a = math.sin(theta) / theta
    b = 2.0 * math.sin(theta / 2.0) ** 2 / theta**2
    return np.eye(3) + a * S + b * (S @ S)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Principal rotation vector of a rotation matrix.

    The angle comes from an atan2 form that stays well conditioned at both
    ends of [0, pi]; near pi the axis comes from the symmetric part's
    dominant eigenvector with the sign convention described in the module
    docstring.
    """
    R = validate_rotation(R)
    s_vec = vee(R - R.T) / 2.0  # sin(theta) * axis
    s = float(np.linalg.norm(s_vec))
    c = (float(np.trace(R)) - 1.0) / 2.0
    theta = math.atan2(s, min(max(c, -1.0), 1.0))
    if theta < SMALL_ANGLE:
        # log(R) ~ s_vec * (1 + theta^2/6); the correction is below 1e-10 here
        return s_vec
    if math.pi - theta < 1e-4:
        # near a half-turn sin(theta) ~ 0: recover the axis from
        # (R + R^T)/2 = cos(t) I + (1 - cos(t)) n n^T
        B = (R + R.T) / 2.0
        w, V = np.linalg.eigh(B)
        axis = V[:, int(np.argmax(w))]
        axis = axis / np.linalg.norm(axis)
        if s > 1e-12:
            if float(s_vec @ axis) < 0.0:
                axis = -axis
        else:
            # sign convention at exactly pi: largest-|component| positive
            k = int(np.argmax(np.abs(axis)))
            if axis[k] < 0.0:
                axis = -axis
        return theta * axis
    return s_vec * (theta / s)


def _gamma_coefficients(theta: float) -> tuple[float, float, float, float]:
    """Coefficients (a0, c1, c2, c3) of I/S/S^2 terms for the Gamma maps.

    gamma0 = I + a0 S + c1 S^2
    gamma1 = I + c1 S + c2 S^2
    gamma2 = I/2 + c2 S + c3 S^2

    Cancellation-free closed forms; caller handles the Taylor branch.
    """
    a0 = math.sin(theta) / theta
    c1 = 2.0 * math.sin(theta / 2.0) ** 2 / theta**2
    c2 = (theta - math.sin(theta)) / theta**3
    # theta^2 + 2cos(theta) - 2 == (t - 2 sin(t/2)) (t + 2 sin(t/2))
    c3 = (theta - 2.0 * math.sin(theta / 2.0)) * (theta + 2.0 * math.sin(theta / 2.0)) / (
        2.0 * theta**4
    )
    return a0, c1, c2, c3


def gamma1(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3); equals the integral of so3_exp(s*phi) over [0,1]."""
    phi = np.asarray(phi, dtype=float)
    _check_finite(phi, "rotation vector")
    S = hat(phi)
    theta = float(np.linalg.norm(phi))
    if theta < SMALL_ANGLE:
        return np.eye(3) + S / 2.0 + S @ S / 6.0
    _, c1, c2, _ = _gamma_coefficients(theta)
    return np.eye(3) + c1 * S + c2 * (S @ S)


def gamma2(phi: np.ndarray) -> np.ndarray:
    """Double integral of the rotation exponential over the unit triangle.

    gamma2(0) is I/2; appears in the closed-form position update.
    """
    phi = np.asarray(phi, dtype=float)
    _check_finite(phi, "rotation vector")
    S = hat(phi)
    theta = float(np.linalg.norm(phi))
    if theta < SMALL_ANGLE:
        return np.eye(3) / 2.0 + S / 6.0 + S @ S / 24.0
    _, _, c2, c3 = _gamma_coefficients(theta)
    return np.eye(3) / 2.0 + c2 * S + c3 * (S @ S)


@dataclass
class ExtendedPose:
    """Group element (R, v, p): orientation, velocity, position.

    Embeds as a 5x5 matrix with bottom rows [0 1 0] and [0 0 1]; products
    and inverses follow the 5x5 matrix algebra.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.position = np.asarray(self.position, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "ExtendedPose":
        return cls()

    def compose(self, other: "ExtendedPose") -> "ExtendedPose":
        R = self.rotation @ other.rotation
        if rotation_deviation(R) > ROT_TOL:
            R = project_rotation(R)
        return ExtendedPose(
            R,
            self.rotation @ other.velocity + self.velocity,
            self.rotation @ other.position + self.position,
        )

    def inverse(self) -> "ExtendedPose":
        Rt = self.rotation.T
        return ExtendedPose(Rt, -(Rt @ self.velocity), -(Rt @ self.position))

    def as_matrix(self) -> np.ndarray:
        M = np.eye(5)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.velocity
        M[:3, 4] = self.position
        return M

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "ExtendedPose":
        M = np.asarray(M, dtype=float)
        if M.shape != (5, 5):
            raise InvalidArgumentError(f"expected 5x5 embedding, got {M.shape}")
        return cls(M[:3, :3].copy(), M[:3, 3].copy(), M[:3, 4].copy())

    def copy(self) -> "ExtendedPose":
        return ExtendedPose(
            self.rotation.copy(), self.velocity.copy(), self.position.copy()
        )

    def validate(self) -> "ExtendedPose":
        self.rotation = validate_rotation(self.rotation)
        _check_finite(self.velocity, "velocity")
        _check_finite(self.position, "position")
        return self


def se23_hat(xi: np.ndarray) -> np.ndarray:
    """5x5 algebra element of a 9-vector (rotation, velocity, position)."""
    xi = np.asarray(xi, dtype=float).reshape(9)
    M = np.zeros((5, 5))
    M[:3, :3] = hat(xi[:3])
    M[:3, 3] = xi[3:6]
    M[:3, 4] = xi[6:9]
    return M


def se23_vee(M: np.ndarray) -> np.ndarray:
    """Inverse of :func:`se23_hat`."""
    M = np.asarray(M, dtype=float)
    return np.concatenate([vee(M[:3, :3]), M[:3, 3], M[:3, 4]])


def se23_exp(xi: np.ndarray) -> ExtendedPose:
    """Closed-form group exponential of a 9-vector."""
    xi = np.asarray(xi, dtype=float).reshape(9)
    _check_finite(xi, "tangent vector")
    G1 = gamma1(xi[:3])
    return ExtendedPose(so3_exp(xi[:3]), G1 @ xi[3:6], G1 @ xi[6:9])


def se23_log(X: ExtendedPose) -> np.ndarray:
    """Principal-branch logarithm; inverse of :func:`se23_exp`."""
    phi = so3_log(X.rotation)
    G1 = gamma1(phi)
    return np.concatenate(
        [phi, np.linalg.solve(G1, X.velocity), np.linalg.solve(G1, X.position)]
    )


def adjoint(X: ExtendedPose) -> np.ndarray:
    """9x9 adjoint matrix so that X hat(xi) X^-1 == hat(adjoint(X) @ xi)."""
    R = validate_rotation(X.rotation)
    A = np.zeros((9, 9))
    A[0:3, 0:3] = R
    A[3:6, 3:6] = R
    A[6:9, 6:9] = R
    A[3:6, 0:3] = hat(X.velocity) @ R
    A[6:9, 0:3] = hat(X.position) @ R
    return A


def left_retract(xi: np.ndarray, X: ExtendedPose) -> ExtendedPose:
    """Left perturbation retraction: exp(hat(xi)) composed with X."""
    return se23_exp(xi).compose(X)


def se23_adjoint_algebra(xi: np.ndarray) -> np.ndarray:
    """9x9 algebra adjoint (the bracket matrix ad_xi)."""
    xi = np.asarray(xi, dtype=float).reshape(9)
    S = hat(xi[:3])
    A = np.zeros((9, 9))
    A[0:3, 0:3] = S
    A[3:6, 3:6] = S
    A[6:9, 6:9] = S
    A[3:6, 0:3] = hat(xi[3:6])
    A[6:9, 0:3] = hat(xi[6:9])
    return A


def se23_left_jacobian(xi: np.ndarray, terms: int = 30) -> np.ndarray:
    """Left Jacobian of the group exponential (series in the algebra adjoint).

    Factorial convergence; 30 terms are exact to double precision for
    rotation angles up to pi and moderate velocity/position parts.
    """
    A = se23_adjoint_algebra(xi)
    J = np.zeros((9, 9))
    P = np.eye(9)
    for n in range(terms):
        J += P / math.factorial(n + 1)
        P = P @ A
    return J


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        w = math.sqrt(1.0 + t) / 2.0
        s = 1.0 / (4.0 * w)
        q = np.array(
            [(R[2, 1] - R[1, 2]) * s, (R[0, 2] - R[2, 0]) * s, (R[1, 0] - R[0, 1]) * s, w]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0)) / 2.0
        q = np.zeros(4)
        q[i] = s
        q[3] = (R[k, j] - R[j, k]) / (4.0 * s)
        q[j] = (R[j, i] + R[i, j]) / (4.0 * s)
        q[k] = (R[k, i] + R[i, k]) / (4.0 * s)
    q = q / np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion (x, y, z, w); normalizes first."""
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-12 or not np.isfinite(n):
        raise InvalidArgumentError("quaternion has (near-)zero norm")
    x, y, z, w = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
