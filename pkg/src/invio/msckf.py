"""Invariant sliding-window filter with externally supplied IMU bias.

The filter state is the current extended pose plus a window of cloned past
poses; landmarks never enter the state.  Errors are right-invariant
(perturbation exp(hat(xi)) X) for the current state and every clone alike,
so the covariance transition never reads the state estimate.  Bias comes
from a predictor (learned network, constant stub, or zero) instead of being
estimated in the filter.

Single-owner state machine: one mutator at a time; snapshots returned to
callers are copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .dataio import CameraModel, FrameObservations
from .errors import (
    CheiralityError,
    ConvergenceError,
    DegenerateGeometryError,
    InvalidArgumentError,
    NumericError,
    StateCorruptionError,
)
from .inertial import (
    ImuBias,
    ImuSample,
    NoiseParams,
    invariant_transition,
    propagate_covariance,
    propagate_state,
)
from .liegroup import ExtendedPose, adjoint, hat, se23_exp

BLOCK = 9


@dataclass
class FeatureTrack:
    """Pixel observations of one landmark across clone frames."""

    feature_id: int
    observations: list = field(default_factory=list)  # [(clone_key, uv)]

    def add(self, clone_key: int, uv) -> None:
        self.observations.append((clone_key, np.asarray(uv, dtype=float).reshape(2)))

    def __len__(self) -> int:
        return len(self.observations)


@dataclass
class Clone:
    key: int
    t: float
    pose: ExtendedPose


@dataclass
class VioConfig:
    """Filter settings; defaults mirror the reference configuration.

    ``min_baseline_ratio`` rejects tracks whose viewing baseline is small
    relative to the landmark depth; weakly conditioned triangulations are
    the main source of filter overconfidence.
    """

    window: int = 11
    gating: bool = False
    gate_confidence: float = 0.95
    min_track_obs: int = 3
    max_gn_iterations: int = 20
    min_baseline: float = 0.02
    min_baseline_ratio: float = 0.04
    init_cov_rotation: float = 1e-4
    init_cov_velocity: float = 1e-2
    init_cov_position: float = 1e-4
    imu_gap_factor: float = 5.0
    max_update_tracks: int = 40

    def initial_covariance(self) -> np.ndarray:
        d = np.concatenate(
            [
                np.full(3, self.init_cov_rotation),
                np.full(3, self.init_cov_velocity),
                np.full(3, self.init_cov_position),
            ]
        )
        return np.diag(d)


@dataclass
class FilterState:
    """Current extended pose, clone window, and joint covariance."""

    state: ExtendedPose
    cov: np.ndarray
    bias: ImuBias = field(default_factory=ImuBias.zero)
    clones: list = field(default_factory=list)  # oldest first
    window: int = 11
    _next_key: int = 0

    @property
    def dim(self) -> int:
        return BLOCK * (1 + len(self.clones))

    def clone_index(self, key: int) -> int:
        for i, c in enumerate(self.clones):
            if c.key == key:
                return i
        raise InvalidArgumentError(f"unknown clone key {key}")

    def clone_pose(self, key: int) -> ExtendedPose:
        return self.clones[self.clone_index(key)].pose

    def check_covariance(self) -> None:
        P = self.cov
        scale = max(1.0, float(np.abs(P).max()))
        if not np.all(np.isfinite(P)):
            raise StateCorruptionError("covariance has non-finite entries")
        if float(np.abs(P - P.T).max()) > 1e-9 * scale:
            raise StateCorruptionError("covariance lost symmetry")


def make_filter(
    init_pose: ExtendedPose, cfg: VioConfig, bias: ImuBias | None = None
) -> FilterState:
    return FilterState(
        state=init_pose.copy(),
        cov=cfg.initial_covariance(),
        bias=bias or ImuBias.zero(),
        window=cfg.window,
    )


def propagate(
    fs: FilterState, u: ImuSample, bias: ImuBias, dt: float, noise: NoiseParams
) -> FilterState:
    """Propagate mean and joint covariance over one IMU interval.

    Clone blocks are constant (identity Jacobian, zero process noise); only
    the current-state rows/columns see the transition matrix.
    """
    fs.bias = bias
    Phi = invariant_transition(dt, noise)
    P_next_block = propagate_covariance(fs.cov[:BLOCK, :BLOCK], fs.state, dt, noise)
    fs.state = propagate_state(fs.state, u, bias, dt, noise)
    P = fs.cov
    P[:BLOCK, BLOCK:] = Phi @ P[:BLOCK, BLOCK:]
    P[BLOCK:, :BLOCK] = P[:BLOCK, BLOCK:].T
    P[:BLOCK, :BLOCK] = P_next_block
    fs.check_covariance()
    return fs


def augment_clone(fs: FilterState, t: float) -> int:
    """Clone the current pose into the window; returns the clone key.

    If the window is already full the oldest clone is marginalized first.
    The new clone's error equals the current state's error, so its
    covariance blocks are exact copies.
    """
    if len(fs.clones) >= fs.window:
        marginalize(fs)
    n = fs.dim
    P = np.zeros((n + BLOCK, n + BLOCK))
    P[:n, :n] = fs.cov
    P[n:, :n] = fs.cov[:BLOCK, :]
    P[:n, n:] = fs.cov[:, :BLOCK]
    P[n:, n:] = fs.cov[:BLOCK, :BLOCK]
    fs.cov = P
    key = fs._next_key
    fs._next_key += 1
    fs.clones.append(Clone(key, t, fs.state.copy()))
    return key


def marginalize(fs: FilterState, policy: str = "fifo") -> FilterState:
    """Drop the oldest clone (FIFO) and its covariance rows/columns."""
    if policy != "fifo":
        raise InvalidArgumentError(f"unknown marginalization policy {policy!r}")
    if not fs.clones:
        return fs
    fs.clones.pop(0)
    idx = np.arange(BLOCK, 2 * BLOCK)  # first clone block
    fs.cov = np.delete(np.delete(fs.cov, idx, axis=0), idx, axis=1)
    return fs


# -- landmark geometry -----------------------------------------------------------


def _camera_pose(pose: ExtendedPose, cam: CameraModel):
    """World-from-camera rotation and camera center."""
    R_wc = pose.rotation @ cam.body_to_camera_rotation.T
    c_w = pose.position - R_wc @ cam.body_to_camera_translation
    return R_wc, c_w


@dataclass
class TriangulationResult:
    point: np.ndarray
    mean_residual_px: float
    iterations: int


def triangulate(track: FeatureTrack, clone_poses: dict, cam: CameraModel,
                min_obs: int = 3, max_iterations: int = 20,
                min_baseline: float = 0.02) -> TriangulationResult:
    """Landmark from multi-view rays: linear init + Gauss-Newton refinement.

    Gauss-Newton runs on inverse-depth parameters anchored in the first
    observing camera, minimizing pixel reprojection error.
    """
    obs = [(clone_poses[k], uv) for k, uv in track.observations if k in clone_poses]
    if len(obs) < max(2, min_obs):
        raise DegenerateGeometryError(
            f"track {track.feature_id}: {len(obs)} usable observations"
        )
    cams = [_camera_pose(pose, cam) for pose, _ in obs]
    centers = np.array([c for _, c in cams])
    baseline = 0.0
    for i in range(len(centers)):
        d = np.linalg.norm(centers[i] - centers[0])
        baseline = max(baseline, d)
    if baseline < min_baseline:
        raise DegenerateGeometryError(
            f"track {track.feature_id}: baseline {baseline:.3e} below threshold"
        )

    # linear init: midpoint of rays, solve sum (I - d d^T) x = sum (I - d d^T) c
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for (R_wc, c_w), (_, uv) in zip(cams, obs):
        ray_c = np.array([(uv[0] - cam.cx) / cam.fx, (uv[1] - cam.cy) / cam.fy, 1.0])
        d = R_wc @ ray_c
        d = d / np.linalg.norm(d)
        M = np.eye(3) - np.outer(d, d)
        A += M
        b += M @ c_w
    try:
        point = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        raise DegenerateGeometryError(f"track {track.feature_id}: singular ray system")

    # Gauss-Newton on inverse depth in the anchor camera
    R0, c0 = cams[0]
    q0 = R0.T @ (point - c0)
    if q0[2] <= 1e-6:
        raise CheiralityError(f"track {track.feature_id}: init behind anchor camera")
    params = np.array([q0[0] / q0[2], q0[1] / q0[2], 1.0 / q0[2]])  # (alpha, beta, rho)

    def residuals_jac(params):
        alpha, beta, rho = params
        res = np.zeros(2 * len(obs))
        J = np.zeros((2 * len(obs), 3))
        for i, ((R_wc, c_w), (_, uv)) in enumerate(zip(cams, obs)):
            # landmark = c0 + (1/rho) R0 [alpha, beta, 1]
            R_rel = R_wc.T @ R0
            t_rel = R_wc.T @ (c0 - c_w)
            q = R_rel @ np.array([alpha, beta, 1.0]) + rho * t_rel
            if q[2] <= 1e-9:
                raise CheiralityError(
                    f"track {track.feature_id}: point behind camera {i}"
                )
            u = cam.fx * q[0] / q[2] + cam.cx
            v = cam.fy * q[1] / q[2] + cam.cy
            res[2 * i] = uv[0] - u
            res[2 * i + 1] = uv[1] - v
            dq = np.column_stack([R_rel[:, 0], R_rel[:, 1], t_rel])
            du = np.array([cam.fx / q[2], 0.0, -cam.fx * q[0] / q[2] ** 2]) @ dq
            dv = np.array([0.0, cam.fy / q[2], -cam.fy * q[1] / q[2] ** 2]) @ dq
            J[2 * i] = -du
            J[2 * i + 1] = -dv
        return res, J

    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        res, J = residuals_jac(params)
        try:
            step = np.linalg.solve(J.T @ J + 1e-12 * np.eye(3), -J.T @ res)
        except np.linalg.LinAlgError:
            raise DegenerateGeometryError(f"track {track.feature_id}: normal matrix singular")
        params = params + step
        if np.linalg.norm(step) < 1e-10:
            converged = True
            break
    if not converged and np.linalg.norm(step) > 1e-6:
        raise ConvergenceError(
            f"track {track.feature_id}: no convergence in {max_iterations} iterations"
        )
    alpha, beta, rho = params
    if rho <= 1e-8:
        raise CheiralityError(f"track {track.feature_id}: non-positive inverse depth")
    point = c0 + (1.0 / rho) * (R0 @ np.array([alpha, beta, 1.0]))
    res, _ = residuals_jac(params)
    # cheirality against every view at the solution
    for i, (R_wc, c_w) in enumerate(cams):
        if (R_wc.T @ (point - c_w))[2] <= 1e-6:
            raise CheiralityError(f"track {track.feature_id}: behind camera {i}")
    mean_res = float(np.mean(np.linalg.norm(res.reshape(-1, 2), axis=1)))
    return TriangulationResult(point, mean_res, it)


def feature_jacobians(
    track: FeatureTrack, fs: FilterState, landmark: np.ndarray, cam: CameraModel
):
    """Stacked residuals and Jacobians for one triangulated landmark.

    Jacobians are taken w.r.t. right-invariant clone errors
    (X <- exp(hat(xi)) X_hat), under which the camera-frame point
    q = R_cb R^T (l - p) + t_cb perturbs as
    dq = R_cb R^T (hat(l) xi_R - xi_p), independent of the pose's position.
    Columns for the current state are zero; H_x spans the full state dim.
    """
    n_obs = len(track.observations)
    H_x = np.zeros((2 * n_obs, fs.dim))
    H_l = np.zeros((2 * n_obs, 3))
    e = np.zeros(2 * n_obs)
    key_to_block = {c.key: 1 + i for i, c in enumerate(fs.clones)}
    for i, (key, uv) in enumerate(track.observations):
        if key not in key_to_block:
            raise InvalidArgumentError(f"track references unknown clone {key}")
        pose = fs.clones[key_to_block[key] - 1].pose
        q = cam.camera_point(pose, landmark)
        if q[2] <= 1e-9:
            raise CheiralityError(f"track {track.feature_id}: behind clone {key}")
        z_hat = cam.project_point(q)
        e[2 * i : 2 * i + 2] = uv - z_hat
        Pi = np.array(
            [
                [cam.fx / q[2], 0.0, -cam.fx * q[0] / q[2] ** 2],
                [0.0, cam.fy / q[2], -cam.fy * q[1] / q[2] ** 2],
            ]
        )
        W = Pi @ cam.body_to_camera_rotation @ pose.rotation.T
        col = BLOCK * key_to_block[key]
        H_x[2 * i : 2 * i + 2, col : col + 3] = W @ hat(landmark)
        H_x[2 * i : 2 * i + 2, col + 6 : col + 9] = -W
        H_l[2 * i : 2 * i + 2] = W
    return H_x, H_l, e


def nullspace_project(H_x: np.ndarray, H_l: np.ndarray, e: np.ndarray):
    """Project residuals/Jacobians onto the left null space of H_l.

    Removes the landmark from the update; the row count drops by 3.
    """
    if H_l.shape[0] < 4:
        raise DegenerateGeometryError("too few rows to project out a landmark")
    if np.linalg.matrix_rank(H_l, tol=1e-10) < 3:
        raise DegenerateGeometryError("landmark Jacobian is rank-deficient")
    Q, _ = np.linalg.qr(H_l, mode="complete")
    N = Q[:, 3:]  # orthonormal basis of the left null space
    return N.T @ H_x, N.T @ e


def mahalanobis_gate(
    fs: FilterState, H: np.ndarray, e: np.ndarray, V: np.ndarray, confidence: float
) -> bool:
    """Chi-square innovation test; True means the measurement passes."""
    S = H @ fs.cov @ H.T + V
    try:
        gamma = float(e @ np.linalg.solve(S, e))
    except np.linalg.LinAlgError:
        return False
    return gamma <= chi2.ppf(confidence, df=len(e))


def update(fs: FilterState, H: np.ndarray, e: np.ndarray, V: np.ndarray) -> FilterState:
    """Kalman update with Joseph-form covariance and blockwise retraction.

    All blocks (current state and clones) retract simultaneously from one
    gain evaluation: X <- exp(hat(K e)) X.
    """
    if H.shape[0] != len(e) or H.shape[1] != fs.dim or V.shape != (len(e), len(e)):
        raise InvalidArgumentError("update dimensions are inconsistent")
    P = fs.cov
    S = H @ P @ H.T + V
    S = (S + S.T) / 2.0
    try:
        c_factor = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NumericError("innovation covariance is not positive definite")
    # K = P H^T S^-1 via two triangular solves
    PHt = P @ H.T
    K = np.linalg.solve(
        c_factor.T, np.linalg.solve(c_factor, PHt.T)
    ).T
    delta = K @ e
    IKH = np.eye(fs.dim) - K @ H
    P_new = IKH @ P @ IKH.T + K @ V @ K.T
    fs.cov = (P_new + P_new.T) / 2.0
    fs.state = se23_exp(delta[:BLOCK]).compose(fs.state)
    for i, c in enumerate(fs.clones):
        block = delta[BLOCK * (1 + i) : BLOCK * (2 + i)]
        c.pose = se23_exp(block).compose(c.pose)
    fs.check_covariance()
    return fs


# -- full pipeline ------------------------------------------------------------------


@dataclass
class VioResult:
    trajectory: list  # [(t, ExtendedPose)]
    diagnostics: list  # [dict]

    def poses_at_frames(self, frame_times) -> list:
        times = np.array([t for t, _ in self.trajectory])
        out = []
        for t in frame_times:
            i = int(np.argmin(np.abs(times - t)))
            out.append(self.trajectory[i])
        return out


class ZeroBiasPredictor:
    """Stub predictor: always zero bias."""

    def __call__(self, window) -> ImuBias:
        return ImuBias.zero()


class ConstantBiasPredictor:
    """Stub predictor returning a fixed bias (testing aid)."""

    def __init__(self, bias: ImuBias):
        self.bias = bias

    def __call__(self, window) -> ImuBias:
        return ImuBias(self.bias.gyro.copy(), self.bias.accel.copy())


class NetworkBiasPredictor:
    """Sliding-window inference wrapper around a trained bias network."""

    def __init__(self, net):
        self.net = net
        self.window = net.config.window

    def __call__(self, window) -> ImuBias:
        from .biasnet import predict_bias

        return predict_bias(self.net, list(window))[-1]


def _flush_tracks(fs, cam, cfg, active, keys, diagnostics, t):
    """Triangulate and apply the update for the given track ids."""
    used = 0
    for fid in keys:
        track = active.pop(fid)
        if len(track) < max(2, cfg.min_track_obs):
            continue
        if used >= cfg.max_update_tracks:
            continue
        clone_poses = {c.key: c.pose for c in fs.clones}
        try:
            tri = triangulate(
                track,
                clone_poses,
                cam,
                min_obs=cfg.min_track_obs,
                max_iterations=cfg.max_gn_iterations,
                min_baseline=cfg.min_baseline,
            )
            H_x, H_l, e = feature_jacobians(track, fs, tri.point, cam)
            H, e_proj = nullspace_project(H_x, H_l, e)
        except (DegenerateGeometryError, CheiralityError, ConvergenceError) as exc:
            diagnostics.append(
                {"t": t, "event": "reject_track", "feature": fid, "reason": str(exc)}
            )
            continue
        V = np.eye(len(e_proj)) * cam.sigma_px**2
        if cfg.gating and not mahalanobis_gate(fs, H, e_proj, V, cfg.gate_confidence):
            diagnostics.append(
                {
                    "t": t,
                    "event": "update",
                    "feature": fid,
                    "gate": False,
                    "innovation": float(np.linalg.norm(e_proj)),
                    "clones": len(fs.clones),
                }
            )
            continue
        update(fs, H, e_proj, V)
        used += 1
        diagnostics.append(
            {
                "t": t,
                "event": "update",
                "feature": fid,
                "gate": True,
                "rows": len(e_proj),
                "innovation": float(np.linalg.norm(e_proj)),
                "clones": len(fs.clones),
            }
        )


def _process_frame(fs, frame, cam, cfg, active, diagnostics):
    """Stochastic cloning + track bookkeeping + updates for one camera frame."""
    # flush tracks that would lose their oldest observation to marginalization
    if len(fs.clones) >= fs.window:
        dying = fs.clones[0].key
        touching = [
            fid
            for fid, tr in active.items()
            if any(k == dying for k, _ in tr.observations)
        ]
        _flush_tracks(fs, cam, cfg, active, touching, diagnostics, frame.t)
        # anything still referencing the dying clone loses that observation
        for fid in list(active):
            tr = active[fid]
            tr.observations = [(k, uv) for k, uv in tr.observations if k != dying]
            if not tr.observations:
                del active[fid]
    key = augment_clone(fs, frame.t)
    diagnostics.append({"t": frame.t, "event": "clone", "clones": len(fs.clones)})
    seen = set()
    for fid, uv in zip(frame.feature_ids, frame.pixels):
        fid = int(fid)
        seen.add(fid)
        if fid not in active:
            active[fid] = FeatureTrack(fid)
        active[fid].add(key, uv)
    # terminated tracks: previously active, absent in this frame
    terminated = [fid for fid in active if fid not in seen]
    _flush_tracks(fs, cam, cfg, active, terminated, diagnostics, frame.t)
    # tracks that span the full window are used now
    full = [fid for fid, tr in active.items() if len(tr) >= fs.window]
    _flush_tracks(fs, cam, cfg, active, full, diagnostics, frame.t)


def run_vio(
    imu,
    frames,
    predictor,
    cam: CameraModel,
    noise: NoiseParams,
    cfg: VioConfig,
    init_pose: ExtendedPose,
    init_cov: np.ndarray | None = None,
    on_frame=None,
) -> VioResult:
    """Run the full pipeline over time-ordered IMU samples and camera frames.

    ``predictor`` maps the most recent window of IMU samples to an ImuBias;
    pass None (or ZeroBiasPredictor()) for the zero-bias stub.  Before a
    full window accumulates the bias is zero.  Gaps in the IMU stream are
    reported as diagnostics and propagation continues across them, which is
    exactly the feature-blackout behavior (no updates, IMU-only).
    """
    from collections import deque

    if predictor is None:
        predictor = ZeroBiasPredictor()
    win_len = getattr(predictor, "window", 0)
    fs = make_filter(init_pose, cfg)
    if init_cov is not None:
        fs.cov = np.array(init_cov, dtype=float)
    diagnostics: list = []
    trajectory: list = []
    active: dict = {}
    frame_idx = 0
    nominal_dt = None
    buf: deque = deque(maxlen=max(win_len, 1))

    def frames_at(t):
        nonlocal frame_idx
        out = []
        while frame_idx < len(frames) and frames[frame_idx].t <= t + 1e-9:
            out.append(frames[frame_idx])
            frame_idx += 1
        return out

    trajectory.append((imu[0].t, fs.state.copy()))
    for fr in frames_at(imu[0].t):
        _process_frame(fs, fr, cam, cfg, active, diagnostics)
        if on_frame is not None:
            on_frame(fr.t, fs)
    for k in range(len(imu) - 1):
        u = imu[k]
        buf.append(u)
        dt = imu[k + 1].t - u.t
        if dt <= 0:
            raise InvalidArgumentError(f"non-increasing IMU timestamps at index {k}")
        nominal_dt = dt if nominal_dt is None else min(nominal_dt, dt)
        if dt > cfg.imu_gap_factor * nominal_dt:
            diagnostics.append({"t": u.t, "event": "imu_gap", "dt": dt})
        if win_len and len(buf) < win_len:
            bias = ImuBias.zero()  # cold start until a full window accumulates
        else:
            bias = predictor(buf)
        propagate(fs, u, bias, dt, noise)
        t_now = imu[k + 1].t
        trajectory.append((t_now, fs.state.copy()))
        for fr in frames_at(t_now):
            _process_frame(fs, fr, cam, cfg, active, diagnostics)
            if on_frame is not None:
                on_frame(fr.t, fs)
    return VioResult(trajectory, diagnostics)
