"""Lie operator tests against series/quadrature oracles.

Oracles here are written independently of the closed forms they check:
truncated matrix power series on the 5x5 embedding, and composite Simpson
quadrature for the Gamma integrals.
"""

import math

import numpy as np
import pytest

from invio.errors import InvalidArgumentError
from invio.liegroup import (
    ExtendedPose,
    adjoint,
    gamma1,
    gamma2,
    hat,
    left_retract,
    quaternion_to_rotation,
    rotation_to_quaternion,
    se23_exp,
    se23_hat,
    se23_log,
    se23_vee,
    so3_exp,
    so3_log,
    vee,
)

rng = np.random.default_rng(1234)


def random_rotvec(max_angle=math.pi - 1e-3):
    v = rng.normal(size=3)
    return v * (rng.uniform(0.0, max_angle) / np.linalg.norm(v))


def series_exp3(phi, terms=30):
    """Oracle: truncated power series of the 3x3 matrix exponential."""
    S = hat(phi)
    out = np.zeros((3, 3))
    P = np.eye(3)
    for n in range(terms):
        out += P / math.factorial(n)
        P = P @ S
    return out


def series_exp5(xi, terms=30):
    """Oracle: truncated power series on the 5x5 embedding."""
    M = se23_hat(xi)
    out = np.zeros((5, 5))
    P = np.eye(5)
    for n in range(terms):
        out += P / math.factorial(n)
        P = P @ M
    return out


def _rodrigues_grid(S, theta, scales):
    """Rotation exp(s * hat(phi)) for every scale s at once.

    With S = hat(phi) and alpha = s*theta:
    exp(sS) = I + (sin(alpha)/theta) S + (2 sin^2(alpha/2)/theta^2) S^2.
    """
    if theta == 0.0:
        return np.broadcast_to(np.eye(3), (len(scales), 3, 3)).copy()
    alpha = scales * theta
    a = np.sin(alpha) / theta
    b = 2.0 * np.sin(alpha / 2.0) ** 2 / theta**2
    return (
        np.eye(3)[None, :, :]
        + a[:, None, None] * S[None, :, :]
        + b[:, None, None] * (S @ S)[None, :, :]
    )


def _simpson_weights(nodes):
    w = np.ones(nodes)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w


def simpson_gamma1(phi, nodes=10_001):
    """Oracle: integral of so3_exp(s phi) ds over [0,1] by composite Simpson."""
    s = np.linspace(0.0, 1.0, nodes)
    vals = _rodrigues_grid(hat(phi), float(np.linalg.norm(phi)), s)
    h = 1.0 / (nodes - 1)
    return np.tensordot(_simpson_weights(nodes), vals, axes=1) * h / 3.0


def simpson_gamma2(phi, outer=201, inner=201):
    """Oracle: nested Simpson for the double integral of so3_exp(tau phi)."""
    S = hat(phi)
    theta = float(np.linalg.norm(phi))
    w_in = _simpson_weights(inner)
    w_out = _simpson_weights(outer)

    def integrand_inner(s):
        if s == 0.0:
            return np.zeros((3, 3))
        tau = np.linspace(0.0, s, inner)
        vals = _rodrigues_grid(S, theta, tau)
        h = s / (inner - 1)
        return np.tensordot(w_in, vals, axes=1) * h / 3.0

    s_grid = np.linspace(0.0, 1.0, outer)
    vals = np.stack([integrand_inner(s) for s in s_grid])
    h = 1.0 / (outer - 1)
    return np.tensordot(w_out, vals, axes=1) * h / 3.0


class TestSo3Exp:
    def test_identity(self):
        assert np.allclose(so3_exp(np.zeros(3)), np.eye(3))

    def test_quarter_turn_x(self):
        R = so3_exp(np.array([math.pi / 2, 0, 0]))
        assert np.allclose(R @ np.array([0, 1, 0]), [0, 0, 1], atol=1e-12)
        assert np.allclose(R @ np.array([0, 0, 1]), [0, -1, 0], atol=1e-12)

    def test_matches_series(self):
        for _ in range(200):
            phi = random_rotvec()
            assert np.abs(so3_exp(phi) - series_exp3(phi)).max() < 1e-12

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidArgumentError):
            so3_exp(np.array([np.nan, 0, 0]))


class TestSo3Log:
    def test_identity(self):
        assert np.allclose(so3_log(np.eye(3)), np.zeros(3))

    def test_roundtrip(self):
        for _ in range(300):
            phi = random_rotvec()
            assert np.abs(so3_log(so3_exp(phi)) - phi).max() < 1e-9

    def test_half_turn_about_z(self):
        R = so3_exp(np.array([0, 0, math.pi]))
        phi = so3_log(R)
        # sign convention: largest-|component| positive
        assert np.allclose(phi, [0, 0, math.pi], atol=1e-7)

    def test_near_half_turn_roundtrip(self):
        for _ in range(50):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            phi = axis * (math.pi - 10 ** rng.uniform(-9, -3))
            R = so3_exp(phi)
            assert np.abs(so3_exp(so3_log(R)) - R).max() < 1e-9

    def test_rejects_non_rotation(self):
        with pytest.raises(InvalidArgumentError):
            so3_log(np.eye(3) * 1.5)


class TestGammas:
    def test_gamma1_identity_at_zero(self):
        assert np.allclose(gamma1(np.zeros(3)), np.eye(3))

    def test_gamma2_half_identity_at_zero(self):
        assert np.allclose(gamma2(np.zeros(3)), np.eye(3) / 2)

    def test_gamma1_quadrature(self):
        for _ in range(25):
            phi = random_rotvec()
            assert np.abs(gamma1(phi) - simpson_gamma1(phi)).max() < 1e-8

    def test_gamma2_quadrature(self):
        for _ in range(25):
            phi = random_rotvec()
            assert np.abs(gamma2(phi) - simpson_gamma2(phi)).max() < 1e-8

    def test_exp_identity_relation(self):
        # so3_exp(phi) - I == hat(phi) @ gamma1(phi)
        for _ in range(200):
            phi = random_rotvec()
            lhs = so3_exp(phi) - np.eye(3)
            rhs = hat(phi) @ gamma1(phi)
            assert np.abs(lhs - rhs).max() < 1e-10

    def test_gamma_recurrence(self):
        # gamma1 == I + hat(phi) @ gamma2
        for _ in range(200):
            phi = random_rotvec()
            assert np.abs(gamma1(phi) - np.eye(3) - hat(phi) @ gamma2(phi)).max() < 1e-10

    def test_branch_agreement_at_threshold(self):
        # evaluate both branches right at the switch point
        from invio import liegroup

        for _ in range(50):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            phi = axis * liegroup.SMALL_ANGLE
            S = hat(phi)
            taylor0 = np.eye(3) + S + S @ S / 2
            taylor1 = np.eye(3) + S / 2 + S @ S / 6
            taylor2 = np.eye(3) / 2 + S / 6 + S @ S / 24
            assert np.abs(so3_exp(phi * (1 + 1e-12)) - taylor0).max() < 1e-10
            assert np.abs(gamma1(phi * (1 + 1e-12)) - taylor1).max() < 1e-10
            assert np.abs(gamma2(phi * (1 + 1e-12)) - taylor2).max() < 1e-10


class TestSe23:
    def test_exp_at_zero(self):
        X = se23_exp(np.zeros(9))
        assert np.allclose(X.as_matrix(), np.eye(5))

    def test_pure_translation(self):
        xi = np.concatenate([np.zeros(3), [1.0, -2.0, 3.0], [0.5, 0.5, -0.5]])
        X = se23_exp(xi)
        assert np.allclose(X.rotation, np.eye(3))
        assert np.allclose(X.velocity, xi[3:6])
        assert np.allclose(X.position, xi[6:9])

    def test_exp_matches_series(self):
        for _ in range(200):
            xi = rng.normal(size=9)
            xi[:3] = random_rotvec()
            assert np.abs(se23_exp(xi).as_matrix() - series_exp5(xi)).max() < 1e-12

    def test_log_roundtrip(self):
        for _ in range(300):
            xi = rng.normal(size=9)
            xi[:3] = random_rotvec()
            assert np.abs(se23_log(se23_exp(xi)) - xi).max() < 1e-9

    def test_log_pure_velocity(self):
        X = ExtendedPose(np.eye(3), np.array([1.0, 2.0, 3.0]), np.zeros(3))
        xi = se23_log(X)
        assert np.allclose(xi, [0, 0, 0, 1, 2, 3, 0, 0, 0])

    def test_hat_vee_inverse(self):
        for _ in range(50):
            xi = rng.normal(size=9)
            assert np.array_equal(se23_vee(se23_hat(xi)), xi)

    def test_group_closure(self):
        X = se23_exp(rng.normal(size=9) * 0.5)
        Y = se23_exp(rng.normal(size=9) * 0.5)
        Z = X.compose(Y).compose(Y.inverse())
        assert np.abs(Z.as_matrix() - X.as_matrix()).max() < 1e-12
        Z.validate()


class TestAdjoint:
    def test_identity_pose(self):
        assert np.allclose(adjoint(ExtendedPose.identity()), np.eye(9))

    def test_rotationless_blocks(self):
        v = np.array([1.0, -2.0, 0.5])
        p = np.array([0.1, 0.2, 0.3])
        A = adjoint(ExtendedPose(np.eye(3), v, p))
        assert np.allclose(A[3:6, 0:3], hat(v))
        assert np.allclose(A[6:9, 0:3], hat(p))
        assert np.allclose(A[0:3, 0:3], np.eye(3))

    def test_conjugation_identity(self):
        for _ in range(200):
            xi_x = rng.normal(size=9)
            xi_x[:3] = random_rotvec()
            X = se23_exp(xi_x)
            xi = rng.normal(size=9)
            M = X.as_matrix()
            lhs = M @ se23_hat(xi) @ np.linalg.inv(M)
            rhs = se23_hat(adjoint(X) @ xi)
            assert np.abs(lhs - rhs).max() < 1e-10

    def test_homomorphism(self):
        for _ in range(100):
            X = se23_exp(rng.normal(size=9) * 0.7)
            Y = se23_exp(rng.normal(size=9) * 0.7)
            assert np.abs(adjoint(X.compose(Y)) - adjoint(X) @ adjoint(Y)).max() < 1e-9


class TestRetraction:
    def test_left_retract_perturb_log_roundtrip(self):
        for _ in range(100):
            X = se23_exp(rng.normal(size=9))
            xi = rng.normal(size=9) * 1e-4
            Y = left_retract(xi, X)
            rec = se23_log(Y.compose(X.inverse()))
            assert np.abs(rec - xi).max() < 1e-9


class TestQuaternions:
    def test_roundtrip(self):
        for _ in range(200):
            R = so3_exp(random_rotvec(math.pi - 1e-6))
            q = rotation_to_quaternion(R)
            assert np.abs(quaternion_to_rotation(q) - R).max() < 1e-12

    def test_identity(self):
        q = rotation_to_quaternion(np.eye(3))
        assert np.allclose(q, [0, 0, 0, 1])


def test_hat_vee():
    v = np.array([1.0, 2.0, 3.0])
    M = hat(v)
    # second row, first column (1-indexed (2,1)) carries the third component
    assert M[1, 0] == 3.0 and M[2, 1] == 1.0 and M[0, 2] == 2.0
    assert np.array_equal(vee(M), v)
    assert np.allclose(M @ np.array([0.3, -0.1, 0.7]), np.cross(v, [0.3, -0.1, 0.7]))
