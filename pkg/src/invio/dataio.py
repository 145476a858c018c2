"""Dataset ingestion and the synthetic world generator.

The generator builds an analytic trajectory, samples body rates and
specific forces at the IMU rate, and then defines ground truth as the
closed-form rollout of those sampled inputs.  With the true bias and zero
noise, re-integrating the emitted measurements therefore reproduces the
ground truth to machine precision, which is the self-consistency property
the oracle tests rely on.

Timestamps: loaders keep an integer-nanosecond origin plus float64 seconds
relative to it, because absolute float64 seconds cannot hold nanosecond
resolution at unix-epoch magnitudes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import DataFormatError, InvalidArgumentError
from .inertial import ImuBias, ImuSample, NoiseParams, propagate_state
from .liegroup import (
    ExtendedPose,
    gamma1,
    quaternion_to_rotation,
    rotation_to_quaternion,
    so3_exp,
)

TRAJECTORY_PRIMITIVES = ("hover", "line", "circle", "lissajous", "random-spline")
BIAS_PROFILES = ("zero", "constant", "linear-drift", "random-walk")


@dataclass
class CameraModel:
    """Pinhole camera with body-to-camera extrinsics.

    ``body_to_camera_rotation @ x_body + body_to_camera_translation`` maps a
    body-frame point into the camera frame; the camera looks along +z.
    Default extrinsics point the camera along body +x (forward).
    """

    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    body_to_camera_rotation: np.ndarray = field(
        default_factory=lambda: np.array(
            [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]
        )
    )
    body_to_camera_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma_px: float = 1.0
    image_width: int = 640
    image_height: int = 480

    def __post_init__(self):
        self.body_to_camera_rotation = np.asarray(
            self.body_to_camera_rotation, dtype=float
        )
        self.body_to_camera_translation = np.asarray(
            self.body_to_camera_translation, dtype=float
        ).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")

    def camera_point(self, pose: ExtendedPose, landmark: np.ndarray) -> np.ndarray:
        """World landmark expressed in this camera at the given body pose."""
        x_body = pose.rotation.T @ (landmark - pose.position)
        return self.body_to_camera_rotation @ x_body + self.body_to_camera_translation

    def project_point(self, q: np.ndarray) -> np.ndarray:
        """Pixel coordinates of a camera-frame point (caller checks depth)."""
        return np.array(
            [self.fx * q[0] / q[2] + self.cx, self.fy * q[1] / q[2] + self.cy]
        )

    def in_view(self, q: np.ndarray, min_depth: float = 0.05) -> bool:
        if q[2] < min_depth:
            return False
        uv = self.project_point(q)
        return (
            0.0 <= uv[0] < self.image_width and 0.0 <= uv[1] < self.image_height
        )


@dataclass
class FrameObservations:
    """Keypoint observations of one camera frame."""

    t: float
    feature_ids: np.ndarray
    pixels: np.ndarray  # (n, 2)

    def __post_init__(self):
        self.feature_ids = np.asarray(self.feature_ids, dtype=int).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)


@dataclass
class Dataset:
    """Time-aligned IMU, ground truth, and per-frame feature observations."""

    imu: list
    ground_truth: list  # [(t, ExtendedPose)]
    frames: list  # [FrameObservations]
    camera: CameraModel
    time_origin_ns: int = 0
    true_bias: np.ndarray | None = None  # (n, 6), generator/diagnostics only
    gt_bias: np.ndarray | None = None  # parsed bias columns, diagnostics only
    landmarks: np.ndarray | None = None


@dataclass
class TrajectorySpec:
    """Recipe for one synthetic world."""

    primitive: str = "lissajous"
    amplitude: float = 1.5
    angular_rate: float = 0.5
    duration: float = 30.0
    imu_rate: float = 200.0
    camera_rate: float = 20.0
    bias_profile: str = "zero"
    bias_constant: np.ndarray = field(default_factory=lambda: np.zeros(6))
    bias_drift_rate: np.ndarray = field(default_factory=lambda: np.zeros(6))
    noise: NoiseParams = field(default_factory=NoiseParams)
    add_noise: bool = True
    rotation_amplitude: float = 0.25
    rotation_rate: float = 0.7
    landmark_count: int = 80
    landmark_center: np.ndarray = field(default_factory=lambda: np.array([6.0, 0.0, 0.0]))
    landmark_extent: np.ndarray = field(default_factory=lambda: np.array([4.0, 10.0, 6.0]))
    camera: CameraModel = field(default_factory=CameraModel)
    seed: int = 0

    def __post_init__(self):
        self.bias_constant = np.asarray(self.bias_constant, dtype=float).reshape(6)
        self.bias_drift_rate = np.asarray(self.bias_drift_rate, dtype=float).reshape(6)
        self.landmark_center = np.asarray(self.landmark_center, dtype=float).reshape(3)
        self.landmark_extent = np.asarray(self.landmark_extent, dtype=float).reshape(3)
        if self.primitive not in TRAJECTORY_PRIMITIVES:
            raise InvalidArgumentError(f"unknown trajectory primitive {self.primitive!r}")
        if self.bias_profile not in BIAS_PROFILES:
            raise InvalidArgumentError(f"unknown bias profile {self.bias_profile!r}")
        if self.imu_rate <= 0 or self.camera_rate <= 0:
            raise InvalidArgumentError("rates must be positive")
        stride = self.imu_rate / self.camera_rate
        if abs(stride - round(stride)) > 1e-9:
            raise InvalidArgumentError("camera rate must divide the IMU rate")


def _analytic_path(spec: TrajectorySpec, rng):
    """Position/rotation-vector curves with exact derivatives.

    Returns callables p(t), dp(t), ddp(t), rho(t), drho(t).
    """
    A = spec.amplitude
    w = spec.angular_rate

    if spec.primitive == "hover":
        p = lambda t: np.zeros(3)
        dp = lambda t: np.zeros(3)
        ddp = lambda t: np.zeros(3)
    elif spec.primitive == "line":
        d = np.array([1.0, 0.3, 0.1])
        d /= np.linalg.norm(d)
        p = lambda t: A * math.sin(w * t) * d
        dp = lambda t: A * w * math.cos(w * t) * d
        ddp = lambda t: -A * w**2 * math.sin(w * t) * d
    elif spec.primitive == "circle":
        p = lambda t: np.array([A * math.cos(w * t), A * math.sin(w * t), 0.0])
        dp = lambda t: np.array([-A * w * math.sin(w * t), A * w * math.cos(w * t), 0.0])
        ddp = lambda t: np.array(
            [-A * w**2 * math.cos(w * t), -A * w**2 * math.sin(w * t), 0.0]
        )
    elif spec.primitive == "lissajous":
        wx, wy, wz = w, 1.7 * w, 1.3 * w
        ph = np.array([0.0, 0.9, 2.1])
        amp = np.array([A, 0.8 * A, 0.4 * A])

        def p(t):
            return amp * np.sin(np.array([wx, wy, wz]) * t + ph)

        def dp(t):
            return amp * np.array([wx, wy, wz]) * np.cos(np.array([wx, wy, wz]) * t + ph)

        def ddp(t):
            return -amp * np.array([wx, wy, wz]) ** 2 * np.sin(
                np.array([wx, wy, wz]) * t + ph
            )

    else:  # random-spline
        n_knots = max(4, int(spec.duration * 0.5) + 2)
        ts = np.linspace(0.0, spec.duration, n_knots)
        pts = rng.uniform(-1.0, 1.0, size=(n_knots, 3)) * A
        spline = CubicSpline(ts, pts, bc_type="clamped")
        d1 = spline.derivative(1)
        d2 = spline.derivative(2)
        p = lambda t: np.asarray(spline(t))
        dp = lambda t: np.asarray(d1(t))
        ddp = lambda t: np.asarray(d2(t))

    if spec.primitive == "circle":
        # yaw follows the velocity direction
        rho = lambda t: np.array([0.0, 0.0, w * t + math.pi / 2.0])
        drho = lambda t: np.array([0.0, 0.0, w])
    elif spec.primitive == "hover":
        rho = lambda t: np.zeros(3)
        drho = lambda t: np.zeros(3)
    else:
        ra, rr = spec.rotation_amplitude, spec.rotation_rate
        ph_r = np.array([0.4, 1.3, 2.6])
        axes_rate = np.array([rr, 0.8 * rr, 1.25 * rr])

        def rho(t):
            return ra * np.sin(axes_rate * t + ph_r)

        def drho(t):
            return ra * axes_rate * np.cos(axes_rate * t + ph_r)

    return p, dp, ddp, rho, drho


def _bias_sequence(spec: TrajectorySpec, times, rng) -> np.ndarray:
    n = len(times)
    if spec.bias_profile == "zero":
        return np.zeros((n, 6))
    if spec.bias_profile == "constant":
        return np.tile(spec.bias_constant, (n, 1))
    if spec.bias_profile == "linear-drift":
        return spec.bias_constant[None, :] + np.outer(times, spec.bias_drift_rate)
    # random walk driven by the random-walk densities
    dt = np.diff(times, prepend=times[0])
    dens = np.concatenate(
        [np.full(3, spec.noise.sigma_bg), np.full(3, spec.noise.sigma_ba)]
    )
    steps = rng.normal(size=(n, 6)) * np.sqrt(np.maximum(dt, 0.0))[:, None] * dens
    steps[0] = 0.0
    return spec.bias_constant[None, :] + np.cumsum(steps, axis=0)


def synthesize(spec: TrajectorySpec):
    """Generate a dataset plus the true per-sample bias sequence.

    Returns ``(dataset, true_bias)`` where ``true_bias`` is (n, 6).
    """
    rng = np.random.default_rng(spec.seed)
    p, dp, ddp, rho, drho = _analytic_path(spec, rng)
    dt = 1.0 / spec.imu_rate
    n = int(round(spec.duration * spec.imu_rate)) + 1
    times = np.arange(n) * dt
    g = spec.noise.gravity

    # body rate from the rotation-vector path: omega = J_r(rho) * drho
    omegas = np.empty((n, 3))
    forces = np.empty((n, 3))
    rotations = np.empty((n, 3, 3))
    for k, t in enumerate(times):
        r = rho(t)
        R = so3_exp(r)
        rotations[k] = R
        omegas[k] = gamma1(-r) @ drho(t)
        forces[k] = R.T @ (ddp(t) - g)

    # ground truth = closed-form rollout of the sampled inputs
    X = ExtendedPose(rotations[0], dp(0.0), p(0.0))
    gt = [(0.0, X.copy())]
    for k in range(n - 1):
        X = propagate_state(
            X, ImuSample(times[k], omegas[k], forces[k]), ImuBias.zero(), dt, spec.noise
        )
        gt.append((times[k + 1], X.copy()))

    bias = _bias_sequence(spec, times, rng)
    if spec.add_noise:
        sg = spec.noise.sigma_g * math.sqrt(spec.imu_rate)
        sa = spec.noise.sigma_a * math.sqrt(spec.imu_rate)
        noise_g = rng.normal(size=(n, 3)) * sg
        noise_a = rng.normal(size=(n, 3)) * sa
    else:
        noise_g = np.zeros((n, 3))
        noise_a = np.zeros((n, 3))

    samples = [
        ImuSample(times[k], omegas[k] + bias[k, :3] + noise_g[k], forces[k] + bias[k, 3:] + noise_a[k])
        for k in range(n)
    ]

    landmarks = spec.landmark_center[None, :] + rng.uniform(
        -0.5, 0.5, size=(spec.landmark_count, 3)
    ) * spec.landmark_extent[None, :]
    if spec.primitive == "circle":
        # surround the orbit so some landmarks stay in view under yaw tracking
        radius = spec.amplitude + abs(spec.landmark_extent[0])
        ang = rng.uniform(0, 2 * math.pi, size=spec.landmark_count)
        z = rng.uniform(-0.5, 0.5, size=spec.landmark_count) * spec.landmark_extent[2]
        rad = radius + rng.uniform(-0.5, 0.5, size=spec.landmark_count) * 0.5
        landmarks = np.stack([rad * np.cos(ang), rad * np.sin(ang), z], axis=1)

    stride = int(round(spec.imu_rate / spec.camera_rate))
    frames = []
    for k in range(0, n, stride):
        pose = gt[k][1]
        ids, uvs = [], []
        for m, lm in enumerate(landmarks):
            q = spec.camera.camera_point(pose, lm)
            if not spec.camera.in_view(q):
                continue
            uv = spec.camera.project_point(q)
            if spec.add_noise and spec.camera.sigma_px > 0:
                uv = uv + rng.normal(size=2) * spec.camera.sigma_px
            ids.append(m)
            uvs.append(uv)
        frames.append(
            FrameObservations(times[k], np.array(ids, dtype=int), np.array(uvs).reshape(-1, 2))
        )

    ds = Dataset(
        imu=samples,
        ground_truth=gt,
        frames=frames,
        camera=replace(spec.camera),
        true_bias=bias,
        landmarks=landmarks,
    )
    return ds, bias


# -- EuRoC-layout CSV ----------------------------------------------------------

_IMU_HEADER = (
    "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],"
    "a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]"
)
_GT_HEADER = (
    "#timestamp [ns],p_RS_R_x [m],p_RS_R_y [m],p_RS_R_z [m],"
    "q_RS_w [],q_RS_x [],q_RS_y [],q_RS_z [],"
    "v_RS_R_x [m s^-1],v_RS_R_y [m s^-1],v_RS_R_z [m s^-1],"
    "b_w_RS_S_x [rad s^-1],b_w_RS_S_y [rad s^-1],b_w_RS_S_z [rad s^-1],"
    "b_a_RS_S_x [m s^-2],b_a_RS_S_y [m s^-2],b_a_RS_S_z [m s^-2]"
)


def _parse_floats(parts, path, lineno):
    try:
        return [float(x) for x in parts]
    except ValueError as exc:
        raise DataFormatError(f"bad number: {exc}", path=path, line=lineno)


def _read_csv_rows(path, n_cols):
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != n_cols:
                raise DataFormatError(
                    f"expected {n_cols} columns, got {len(parts)}", path=path, line=lineno
                )
            try:
                ns = int(parts[0])
            except ValueError:
                raise DataFormatError(f"bad timestamp {parts[0]!r}", path=path, line=lineno)
            vals = _parse_floats(parts[1:], path, lineno)
            if not all(math.isfinite(v) for v in vals):
                raise DataFormatError("non-finite field", path=path, line=lineno)
            rows.append((ns, vals))
    return rows


def load_euroc(root) -> Dataset:
    """Load an EuRoC-layout directory (imu0 + state_groundtruth_estimate0).

    Accepts either the dataset root containing ``mav0`` or the ``mav0``
    directory itself.  Ground-truth bias columns are parsed for diagnostics
    only; no estimator input comes from them.
    """
    import os

    root = str(root)
    for cand in (root, os.path.join(root, "mav0")):
        imu_path = os.path.join(cand, "imu0", "data.csv")
        gt_path = os.path.join(cand, "state_groundtruth_estimate0", "data.csv")
        if os.path.exists(imu_path):
            break
    if not os.path.exists(imu_path):
        raise DataFormatError("imu0/data.csv not found", path=root)

    imu_rows = _read_csv_rows(imu_path, 7)
    if not imu_rows:
        raise DataFormatError("empty IMU file", path=imu_path)
    origin_ns = imu_rows[0][0]
    samples = []
    prev = None
    for ns, vals in imu_rows:
        if prev is not None and ns <= prev:
            raise DataFormatError(
                f"non-monotone timestamp {ns}", path=imu_path
            )
        prev = ns
        t = (ns - origin_ns) / 1e9
        samples.append(ImuSample(t, np.array(vals[0:3]), np.array(vals[3:6])))

    gt = []
    gt_bias = []
    if os.path.exists(gt_path):
        prev = None
        for ns, vals in _read_csv_rows(gt_path, 17):
            if prev is not None and ns <= prev:
                raise DataFormatError(f"non-monotone timestamp {ns}", path=gt_path)
            prev = ns
            t = (ns - origin_ns) / 1e9
            pos = np.array(vals[0:3])
            q_wxyz = np.array(vals[3:7])
            vel = np.array(vals[7:10])
            R = quaternion_to_rotation(np.array([q_wxyz[1], q_wxyz[2], q_wxyz[3], q_wxyz[0]]))
            gt.append((t, ExtendedPose(R, vel, pos)))
            gt_bias.append(vals[10:16])

    return Dataset(
        imu=samples,
        ground_truth=gt,
        frames=[],
        camera=CameraModel(),
        time_origin_ns=origin_ns,
        gt_bias=np.array(gt_bias) if gt_bias else None,
    )


def write_euroc(root, dataset: Dataset, true_bias=None):
    """Write a dataset in the EuRoC CSV layout (plus tracks/true-bias files)."""
    import os

    imu_dir = os.path.join(root, "mav0", "imu0")
    gt_dir = os.path.join(root, "mav0", "state_groundtruth_estimate0")
    os.makedirs(imu_dir, exist_ok=True)
    os.makedirs(gt_dir, exist_ok=True)
    origin = dataset.time_origin_ns
    with open(os.path.join(imu_dir, "data.csv"), "w") as fh:
        fh.write(_IMU_HEADER + "\n")
        for s in dataset.imu:
            ns = origin + round(s.t * 1e9)
            vals = ",".join(f"{x:.12g}" for x in np.concatenate([s.omega, s.accel]))
            fh.write(f"{ns},{vals}\n")
    if dataset.ground_truth:
        bias_arr = true_bias if true_bias is not None else np.zeros((len(dataset.ground_truth), 6))
        with open(os.path.join(gt_dir, "data.csv"), "w") as fh:
            fh.write(_GT_HEADER + "\n")
            for (t, pose), b in zip(dataset.ground_truth, bias_arr):
                ns = origin + round(t * 1e9)
                q = rotation_to_quaternion(pose.rotation)  # (x, y, z, w)
                row = np.concatenate(
                    [pose.position, [q[3], q[0], q[1], q[2]], pose.velocity, b]
                )
                fh.write(f"{ns}," + ",".join(f"{x:.12g}" for x in row) + "\n")


# -- tracks file ----------------------------------------------------------------


def load_tracks(path):
    """Parse a 'frame_ts feature_id u v' file into frames and per-id tracks.

    Returns ``(frames, by_id)``: time-ordered FrameObservations and a dict
    feature_id -> [(frame_ts, u, v)].  Input line order does not matter.
    """
    per_frame: dict = {}
    seen = set()
    by_id: dict = {}
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataFormatError(
                    f"expected 'frame_ts feature_id u v', got {len(parts)} fields",
                    path=path,
                    line=lineno,
                )
            try:
                t = float(parts[0])
                fid = int(parts[1])
                u = float(parts[2])
                v = float(parts[3])
            except ValueError as exc:
                raise DataFormatError(f"bad field: {exc}", path=path, line=lineno)
            if not all(math.isfinite(x) for x in (t, u, v)):
                raise DataFormatError("non-finite field", path=path, line=lineno)
            if (t, fid) in seen:
                raise DataFormatError(
                    f"duplicate observation of feature {fid} at {t}", path=path, line=lineno
                )
            seen.add((t, fid))
            per_frame.setdefault(t, []).append((fid, u, v))
            by_id.setdefault(fid, []).append((t, u, v))
    frames = []
    for t in sorted(per_frame):
        obs = sorted(per_frame[t])
        frames.append(
            FrameObservations(
                t,
                np.array([o[0] for o in obs], dtype=int),
                np.array([[o[1], o[2]] for o in obs]).reshape(-1, 2),
            )
        )
    for fid in by_id:
        by_id[fid] = sorted(by_id[fid])
    return frames, by_id


def write_tracks(path, frames):
    with open(path, "w") as fh:
        for fr in frames:
            for fid, uv in zip(fr.feature_ids, fr.pixels):
                fh.write(f"{fr.t:.9f} {int(fid)} {uv[0]:.6f} {uv[1]:.6f}\n")


# -- TUM trajectory files --------------------------------------------------------


def write_trajectory(path, trajectory):
    """Write (t, ExtendedPose) pairs as TUM lines 't px py pz qx qy qz qw'."""
    try:
        with open(path, "w") as fh:
            for t, pose in trajectory:
                q = rotation_to_quaternion(pose.rotation)
                p = pose.position
                fh.write(
                    f"{t:.9f} {p[0]:.12g} {p[1]:.12g} {p[2]:.12g} "
                    f"{q[0]:.12g} {q[1]:.12g} {q[2]:.12g} {q[3]:.12g}\n"
                )
    except OSError as exc:
        raise DataFormatError(f"cannot write trajectory: {exc}", path=path)


def read_trajectory(path):
    """Read a TUM trajectory file back into (t, ExtendedPose) pairs."""
    out = []
    try:
        fh = open(path, "r")
    except OSError as exc:
        raise DataFormatError(f"cannot read trajectory: {exc}", path=path)
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DataFormatError(
                    f"expected 8 fields, got {len(parts)}", path=path, line=lineno
                )
            vals = _parse_floats(parts, path, lineno)
            if not all(math.isfinite(v) for v in vals):
                raise DataFormatError("non-finite field", path=path, line=lineno)
            R = quaternion_to_rotation(np.array(vals[4:8]))
            out.append((vals[0], ExtendedPose(R, np.zeros(3), np.array(vals[1:4]))))
    return out
