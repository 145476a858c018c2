"""Propagation tests against fine-step ODE and continuous Riccati oracles."""

import math

import numpy as np
import pytest

from invio.errors import InvalidArgumentError, StateCorruptionError
from invio.inertial import (
    ImuBias,
    ImuSample,
    NoiseParams,
    error_dynamics_matrix,
    invariant_transition,
    propagate_covariance,
    propagate_state,
    relative_increments,
    validate_covariance9,
)
from invio.liegroup import ExtendedPose, adjoint, hat, se23_exp, se23_log

rng = np.random.default_rng(42)


def rk4_propagate(X, omega, accel, gravity, dt, substeps):
    """Oracle: RK4 integration of the continuous kinematics.

    State as (R, v, p); Rdot = R hat(omega), vdot = R a + g, pdot = v with
    constant body-frame inputs.
    """

    def deriv(R, v, p):
        return R @ hat(omega), R @ accel + gravity, v

    R, v, p = X.rotation.copy(), X.velocity.copy(), X.position.copy()
    h = dt / substeps
    for _ in range(substeps):
        k1 = deriv(R, v, p)
        k2 = deriv(R + h / 2 * k1[0], v + h / 2 * k1[1], p + h / 2 * k1[2])
        k3 = deriv(R + h / 2 * k2[0], v + h / 2 * k2[1], p + h / 2 * k2[2])
        k4 = deriv(R + h * k3[0], v + h * k3[1], p + h * k3[2])
        R = R + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        v = v + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        p = p + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return R, v, p


def euler_riccati(P0, A, Q, dt, substeps):
    """Oracle: forward-Euler integration of Pdot = A P + P A^T + Q."""
    P = P0.copy()
    h = dt / substeps
    for _ in range(substeps):
        P = P + h * (A @ P + P @ A.T + Q)
    return P


def series_expm(A, terms=40):
    out = np.zeros_like(A)
    P = np.eye(A.shape[0])
    for n in range(terms):
        out += P / math.factorial(n)
        P = P @ A
    return out


def random_pose():
    xi = rng.normal(size=9)
    xi[:3] *= 1.5 / max(np.linalg.norm(xi[:3]), 1e-9)
    return se23_exp(xi)


def random_cov9(scale=1.0):
    L = rng.normal(size=(9, 9)) * scale
    return L @ L.T / 9.0


class TestPropagateState:
    def test_stationary_hover(self):
        noise = NoiseParams()
        X = ExtendedPose.identity()
        # accelerometer reads the reaction to gravity
        u = ImuSample(0.0, np.zeros(3), -X.rotation.T @ noise.gravity)
        X1 = propagate_state(X, u, ImuBias.zero(), 0.005, noise)
        assert np.abs(X1.as_matrix() - np.eye(5)).max() < 1e-15

    def test_free_fall(self):
        noise = NoiseParams()
        X = ExtendedPose.identity()
        u = ImuSample(0.0, np.zeros(3), np.zeros(3))
        dt = 0.25
        X1 = propagate_state(X, u, ImuBias.zero(), dt, noise)
        assert np.allclose(X1.velocity, noise.gravity * dt)
        assert np.allclose(X1.position, 0.5 * noise.gravity * dt**2)
        assert np.allclose(X1.rotation, np.eye(3))

    def test_matches_rk4_on_constant_spin(self):
        noise = NoiseParams()
        omega = np.array([0.0, 0.0, 1.2])
        # body-frame centripetal acceleration for a 2 m radius turn
        accel = np.array([-2.0 * 1.2**2, 0.0, 0.0]) - noise.gravity  # plus gravity reaction
        X = ExtendedPose(np.eye(3), np.array([0.0, 2.4, 0.0]), np.zeros(3))
        dt = 0.02
        X1 = propagate_state(X, ImuSample(0.0, omega, accel), ImuBias.zero(), dt, noise)
        R_o, v_o, p_o = rk4_propagate(X, omega, accel, noise.gravity, dt, 1000)
        assert np.abs(X1.rotation - R_o).max() < 1e-8
        assert np.abs(X1.velocity - v_o).max() < 1e-8
        assert np.abs(X1.position - p_o).max() < 1e-8

    def test_matches_rk4_random_inputs(self):
        noise = NoiseParams()
        for _ in range(10):
            X = random_pose()
            omega = rng.normal(size=3)
            accel = rng.normal(size=3) * 3
            b = ImuBias(rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.05)
            dt = 0.01
            u = ImuSample(0.0, omega + b.gyro, accel + b.accel)
            X1 = propagate_state(X, u, b, dt, noise)
            R_o, v_o, p_o = rk4_propagate(X, omega, accel, noise.gravity, dt, 1000)
            assert np.abs(X1.rotation - R_o).max() < 1e-8
            assert np.abs(X1.velocity - v_o).max() < 1e-8
            assert np.abs(X1.position - p_o).max() < 1e-8

    def test_bias_correction_applied(self):
        noise = NoiseParams()
        b = ImuBias(np.array([0.1, 0, 0]), np.array([0, 0.2, 0]))
        u_biased = ImuSample(0.0, b.gyro, -noise.gravity + b.accel)
        X1 = propagate_state(ExtendedPose.identity(), u_biased, b, 0.01, noise)
        assert np.abs(X1.as_matrix() - np.eye(5)).max() < 1e-14

    def test_rejects_bad_dt(self):
        with pytest.raises(InvalidArgumentError):
            propagate_state(
                ExtendedPose.identity(),
                ImuSample(0.0, np.zeros(3), np.zeros(3)),
                ImuBias.zero(),
                0.0,
                NoiseParams(),
            )


class TestInvariantTransition:
    def test_zero_dt(self):
        assert np.array_equal(invariant_transition(0.0, NoiseParams()), np.eye(9))

    def test_block_structure(self):
        noise = NoiseParams()
        dt = 0.37
        Phi = invariant_transition(dt, noise)
        gx = hat(noise.gravity)
        assert np.allclose(Phi[3:6, 0:3], gx * dt)
        assert np.allclose(Phi[6:9, 3:6], np.eye(3) * dt)
        assert np.allclose(Phi[6:9, 0:3], 0.5 * gx * dt**2)
        assert np.allclose(Phi[0:3, 0:3], np.eye(3))

    def test_matches_series_oracle(self):
        noise = NoiseParams()
        dt = 0.005
        A = error_dynamics_matrix(noise)
        assert np.abs(invariant_transition(dt, noise) - series_expm(A * dt)).max() < 1e-14

    def test_nilpotent(self):
        A = error_dynamics_matrix(NoiseParams())
        assert np.abs(A @ A @ A).max() == 0.0

    def test_state_independence_is_structural(self):
        # the transition takes no pose argument and is bit-identical across calls
        a = invariant_transition(0.004, NoiseParams())
        b = invariant_transition(0.004, NoiseParams())
        assert np.array_equal(a, b)


class TestPropagateCovariance:
    def test_noiseless_riccati(self):
        noise = NoiseParams(sigma_g=0.0, sigma_a=0.0, sigma_v=0.0, sigma_bg=0.0, sigma_ba=0.0)
        P = random_cov9()
        dt = 0.01
        Phi = invariant_transition(dt, noise)
        P1 = propagate_covariance(P, random_pose(), dt, noise)
        assert np.abs(P1 - Phi @ P @ Phi.T).max() < 1e-12

    def test_pure_noise_readoff(self):
        noise = NoiseParams(sigma_g=0.2, sigma_a=0.3, sigma_v=0.1)
        dt = 1.0
        P1 = propagate_covariance(np.zeros((9, 9)), ExtendedPose.identity(), dt, noise)
        Phi = invariant_transition(dt, noise)
        Q = noise.propagation_covariance()
        assert np.abs(P1 - Phi @ Q @ Phi.T).max() < 1e-12

    def test_matches_continuous_riccati_oracle(self):
        noise = NoiseParams()
        dt = 1e-3
        for _ in range(5):
            P = random_cov9()
            X = random_pose()
            A = error_dynamics_matrix(noise)
            G = adjoint(X)
            Q = G @ noise.propagation_covariance() @ G.T
            P_oracle = euler_riccati(P, A, Q, dt, 1000)
            P1 = propagate_covariance(P, X, dt, noise)
            rel = np.abs(P1 - P_oracle).max() / np.abs(P_oracle).max()
            assert rel < 1e-6

    def test_symmetry_psd_long_run(self):
        noise = NoiseParams()
        P = np.eye(9) * 1e-4
        X = random_pose()
        for k in range(2000):
            P = propagate_covariance(P, X, 0.005, noise)
        assert np.abs(P - P.T).max() == 0.0
        assert np.linalg.eigvalsh(P).min() >= -1e-12

    def test_rejects_non_psd(self):
        P = -np.eye(9)
        with pytest.raises(StateCorruptionError):
            propagate_covariance(P, ExtendedPose.identity(), 0.01, NoiseParams())

    def test_validate_covariance9_shape(self):
        with pytest.raises(InvalidArgumentError):
            validate_covariance9(np.eye(8))


class TestGroupAffineProperty:
    def test_error_evolves_linearly(self):
        """Propagating X and exp(xi) X yields errors following Phi xi.

        The invariant error is exactly log-linear for this system, so the
        quadratic bound holds with a tiny constant.
        """
        noise = NoiseParams()
        dt = 0.01
        Phi = invariant_transition(dt, noise)
        for scale in (1e-2, 1e-4):
            worst = 0.0
            for _ in range(20):
                X = random_pose()
                xi = rng.normal(size=9) * scale
                u = ImuSample(0.0, rng.normal(size=3), rng.normal(size=3) * 2)
                X1 = propagate_state(X, u, ImuBias.zero(), dt, noise)
                X2 = propagate_state(se23_exp(xi).compose(X), u, ImuBias.zero(), dt, noise)
                err_after = se23_log(X2.compose(X1.inverse()))
                worst = max(worst, np.abs(err_after - Phi @ xi).max())
            assert worst <= 10.0 * scale**2 + 1e-12


class TestRelativeIncrements:
    @staticmethod
    def _make_sequence(n, dt, omega_zero=True, seed=0):
        """Roll a trajectory with zero corrected gyro rate so the increment
        sums match the closed-form propagation exactly."""
        local = np.random.default_rng(seed)
        noise = NoiseParams()
        b = ImuBias(local.normal(size=3) * 0.02, local.normal(size=3) * 0.05)
        X = ExtendedPose(
            np.eye(3) if omega_zero else se23_exp(local.normal(size=9)).rotation,
            local.normal(size=3),
            local.normal(size=3),
        )
        samples, biases, rotations, states = [], [], [], [X]
        for k in range(n):
            accel = local.normal(size=3) * 2
            u = ImuSample(k * dt, b.gyro, accel + b.accel)
            samples.append(u)
            biases.append(b)
            rotations.append(states[-1].rotation)
            states.append(propagate_state(states[-1], u, b, dt, noise))
        return noise, samples, biases, rotations, states

    def test_zero_world_acceleration(self):
        noise = NoiseParams()
        n = 50
        dt = 0.01
        R = np.eye(3)
        samples = [
            ImuSample(k * dt, np.zeros(3), -R.T @ noise.gravity) for k in range(n)
        ]
        biases = [ImuBias.zero()] * n
        rotations = [R] * n
        v0 = np.array([0.4, -0.2, 0.1])
        dv, dp, dp_free = relative_increments(rotations, samples, biases, v0, noise)
        span = samples[-1].t - samples[0].t
        assert np.abs(dv).max() < 1e-12
        assert np.allclose(dp, v0 * span, atol=1e-12)
        assert np.abs(dp_free).max() < 1e-12

    def test_single_step(self):
        noise = NoiseParams()
        dt = 0.02
        R = se23_exp(np.array([0.2, -0.1, 0.3, 0, 0, 0, 0, 0, 0])).rotation
        accel = np.array([1.0, 2.0, -0.5])
        b = ImuBias(np.zeros(3), np.array([0.05, 0.0, -0.02]))
        samples = [ImuSample(0.0, np.zeros(3), accel), ImuSample(dt, np.zeros(3), accel)]
        v0 = np.array([0.1, 0.0, 0.0])
        dv, dp, dp_free = relative_increments([R, R], samples, [b, b], v0, noise)
        f = R @ (accel - b.accel) + noise.gravity
        assert np.allclose(dv, f * dt)
        assert np.allclose(dp, v0 * dt + 0.5 * f * dt**2)
        assert np.allclose(dp_free, 0.5 * f * dt**2)

    def test_matches_rollout_differences(self):
        # with zero corrected gyro rate the sums equal the rollout exactly;
        # n aligned entries span n-1 intervals, ending at states[n-1]
        noise, samples, biases, rotations, states = self._make_sequence(80, 0.005)
        end = states[len(samples) - 1]
        dv, dp, _ = relative_increments(
            rotations, samples, biases, states[0].velocity, noise
        )
        assert np.abs(dv - (end.velocity - states[0].velocity)).max() < 1e-9
        assert np.abs(dp - (end.position - states[0].position)).max() < 1e-9

    def test_converges_to_rollout_under_rotation(self):
        # with rotation the increment sums are first-order in dt
        noise = NoiseParams()
        errs = []
        for dt in (0.01, 0.005):
            n = int(round(0.5 / dt))
            local = np.random.default_rng(7)
            X = ExtendedPose.identity()
            samples, rotations, states = [], [], [X]
            omega = np.array([0.6, -0.4, 0.8])
            for k in range(n):
                accel = np.array([1.0, 0.5, -0.3]) + 0.1 * np.sin(k * dt)
                u = ImuSample(k * dt, omega, accel)
                samples.append(u)
                rotations.append(states[-1].rotation)
                states.append(propagate_state(states[-1], u, ImuBias.zero(), dt, noise))
            biases = [ImuBias.zero()] * n
            dv, dp, _ = relative_increments(
                rotations, samples, biases, states[0].velocity, noise
            )
            end = states[len(samples) - 1]
            errs.append(np.abs(dv - (end.velocity - states[0].velocity)).max())
        assert errs[1] < 0.7 * errs[0]  # roughly O(dt)

    def test_rejects_length_mismatch(self):
        noise = NoiseParams()
        with pytest.raises(InvalidArgumentError):
            relative_increments(
                [np.eye(3)] * 3,
                [ImuSample(0, np.zeros(3), np.zeros(3))] * 2,
                [ImuBias.zero()] * 3,
                np.zeros(3),
                noise,
            )
