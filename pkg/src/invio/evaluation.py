"""Trajectory metrics (ATE, relative error) and the blackout harness.

Alignment choices: ``none``, ``SE3`` (least-squares rigid alignment), and
``posyaw`` (yaw + translation only; the default for gravity-observable VIO
runs).  Relative error slices sub-trajectories by fractions of the total
traveled distance and reports the full sample set with mean, std and
quartiles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import FrameObservations
from .errors import InsufficientDataError, InvalidArgumentError
from .inertial import NoiseParams
from .liegroup import ExtendedPose, so3_log

RE_FRACTIONS = (0.025, 0.05, 0.075, 0.10)


def associate(est, ref, tolerance=None):
    """Nearest-neighbor timestamp association within a tolerance.

    Default tolerance: half the coarser stream's median period.
    """
    if not est or not ref:
        raise InsufficientDataError("empty trajectory")
    t_est = np.array([t for t, _ in est])
    t_ref = np.array([t for t, _ in ref])
    if tolerance is None:
        def period(ts):
            return float(np.median(np.diff(ts))) if len(ts) > 1 else 0.0

        tolerance = 0.5 * max(period(t_est), period(t_ref))
        if tolerance == 0.0:
            tolerance = 1e-6
    pairs = []
    j = 0
    for i, t in enumerate(t_est):
        j = int(np.searchsorted(t_ref, t))
        best = None
        for cand in (j - 1, j):
            if 0 <= cand < len(t_ref):
                d = abs(t_ref[cand] - t)
                if best is None or d < best[0]:
                    best = (d, cand)
        if best is not None and best[0] <= tolerance:
            pairs.append((i, best[1]))
    return pairs


def umeyama_alignment(src: np.ndarray, dst: np.ndarray):
    """Rigid (rotation + translation) least-squares alignment src -> dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_d - R @ mu_s
    return R, t

def posyaw_alignment(src: np.ndarray, dst: np.ndarray):
    """Yaw-rotation + translation least-squares alignment src -> dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    s = src - mu_s
    d = dst - mu_d
    # maximize sum cos(yaw)*(xs xd + ys yd) + sin(yaw)*(xs yd - ys xd)
    a = float(np.sum(s[:, 0] * d[:, 0] + s[:, 1] * d[:, 1]))
    b = float(np.sum(s[:, 0] * d[:, 1] - s[:, 1] * d[:, 0]))
    yaw = math.atan2(b, a)
    c, sn = math.cos(yaw), math.sin(yaw)
    R = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
    t = mu_d - R @ mu_s
    return R, t


@dataclass
class FractionReport:
    fraction: float
    samples: np.ndarray
    available: bool

    @property
    def mean(self):
        return float(np.mean(self.samples)) if self.available else float("nan")

    @property
    def std(self):
        return float(np.std(self.samples)) if self.available else float("nan")

    @property
    def quartiles(self):
        if not self.available:
            return (float("nan"),) * 3
        q = np.percentile(self.samples, [25, 50, 75])
        return tuple(float(x) for x in q)


@dataclass
class MetricReport:
    ate_translation_m: float
    ate_rotation_deg: float
    relative_errors: dict = field(default_factory=dict)  # fraction -> FractionReport

    def lines(self):
        out = [
            f"ate_translation_m {self.ate_translation_m:.9g}",
            f"ate_rotation_deg {self.ate_rotation_deg:.9g}",
        ]
        for frac in sorted(self.relative_errors):
            r = self.relative_errors[frac]
            if r.available:
                q1, q2, q3 = r.quartiles
                out.append(
                    f"re_trans_m fraction={frac:g} mean={r.mean:.9g} std={r.std:.9g} "
                    f"q25={q1:.9g} median={q2:.9g} q75={q3:.9g} n={len(r.samples)}"
                )
            else:
                out.append(f"re_trans_m fraction={frac:g} missing")
        return out

    def records(self):
        recs = {
            "ate_translation_m": self.ate_translation_m,
            "ate_rotation_deg": self.ate_rotation_deg,
            "relative_error": {},
        }
        for frac, r in self.relative_errors.items():
            recs["relative_error"][str(frac)] = (
                {
                    "mean": r.mean,
                    "std": r.std,
                    "quartiles": list(r.quartiles),
                    "n": int(len(r.samples)),
                }
                if r.available
                else None
            )
        return recs


def ate(est, ref, alignment="posyaw"):
    """Absolute trajectory error after optional alignment.

    Returns (translation RMSE in meters, rotation RMSE in degrees).
    """
    if alignment not in ("none", "SE3", "posyaw"):
        raise InvalidArgumentError(f"unknown alignment {alignment!r}")
    pairs = associate(est, ref)
    if len(pairs) < 2:
        raise InsufficientDataError(f"only {len(pairs)} associated pairs")
    P_est = np.array([est[i][1].position for i, _ in pairs])
    P_ref = np.array([ref[j][1].position for _, j in pairs])
    if alignment == "SE3":
        R_a, t_a = umeyama_alignment(P_est, P_ref)
    elif alignment == "posyaw":
        R_a, t_a = posyaw_alignment(P_est, P_ref)
    else:
        R_a, t_a = np.eye(3), np.zeros(3)
    P_al = P_est @ R_a.T + t_a
    trans_rmse = float(np.sqrt(np.mean(np.sum((P_al - P_ref) ** 2, axis=1))))
    angles = []
    for (i, j) in pairs:
        R_err = (R_a @ est[i][1].rotation) @ ref[j][1].rotation.T
        angles.append(np.linalg.norm(so3_log(R_err)))
    rot_rmse = float(np.degrees(np.sqrt(np.mean(np.square(angles)))))
    return trans_rmse, rot_rmse


def relative_error(est, ref, fractions=RE_FRACTIONS):
    """Translation error over sub-trajectories of fixed traveled distance.

    For each start pose the end pose is the first one at least the target
    distance further along the reference; both motions are expressed in
    their start frames before differencing.  Fractions whose windows cannot
    be formed (e.g. the estimate ends early) come back marked unavailable.
    """
    pairs = associate(est, ref)
    if len(pairs) < 2:
        raise InsufficientDataError(f"only {len(pairs)} associated pairs")
    # fractions are of the FULL reference distance, so a truncated estimate
    # can leave the longer windows without samples
    P_full = np.array([pose.position for _, pose in ref])
    total = float(np.sum(np.linalg.norm(np.diff(P_full, axis=0), axis=1)))
    if total <= 1e-9:
        raise InsufficientDataError("reference trajectory has zero traveled distance")
    P_ref = np.array([ref[j][1].position for _, j in pairs])
    step = np.linalg.norm(np.diff(P_ref, axis=0), axis=1)
    cumdist = np.concatenate([[0.0], np.cumsum(step)])
    out = {}
    for frac in fractions:
        target = frac * total
        samples = []
        k = 0
        for i in range(len(pairs)):
            if k < i + 1:
                k = i + 1
            while k < len(pairs) and cumdist[k] - cumdist[i] < target:
                k += 1
            if k >= len(pairs):
                break
            ei, ri = pairs[i]
            ek, rk = pairs[k]
            d_ref = ref[ri][1].rotation.T @ (ref[rk][1].position - ref[ri][1].position)
            d_est = est[ei][1].rotation.T @ (est[ek][1].position - est[ei][1].position)
            samples.append(float(np.linalg.norm(d_est - d_ref)))
        arr = np.array(samples)
        out[frac] = FractionReport(frac, arr, available=len(arr) > 0)
    return out


def evaluate(est, ref, alignment="posyaw", fractions=RE_FRACTIONS) -> MetricReport:
    t_rmse, r_rmse = ate(est, ref, alignment)
    return MetricReport(t_rmse, r_rmse, relative_error(est, ref, fractions))


@dataclass
class BlackoutResult:
    report_clean: MetricReport
    report_blackout: MetricReport
    trajectory_clean: list
    trajectory_blackout: list
    diagnostics_clean: list
    diagnostics_blackout: list


def suppress_frames(frames, start: float, duration: float):
    """Empty out feature observations inside [start, start + duration)."""
    out = []
    for fr in frames:
        if start <= fr.t < start + duration:
            out.append(FrameObservations(fr.t, np.array([], dtype=int), np.zeros((0, 2))))
        else:
            out.append(fr)
    return out


def blackout_harness(
    dataset,
    predictor,
    vio_cfg,
    noise: NoiseParams,
    blackout,
    alignment="posyaw",
    out_dir=None,
) -> BlackoutResult:
    """Paired VIO runs with and without a visual blackout window.

    ``blackout`` is (start_s, duration_s); the window must lie inside the
    data span.  Runs are deterministic, so a zero-duration blackout yields
    bit-identical trajectories.
    """
    from .msckf import run_vio

    start, duration = blackout
    t0 = dataset.imu[0].t
    t1 = dataset.imu[-1].t
    if duration < 0 or not (t0 <= start and start + duration <= t1):
        raise InvalidArgumentError(
            f"blackout window [{start}, {start + duration}] outside data span [{t0}, {t1}]"
        )
    init = dataset.ground_truth[0][1]
    res_clean = run_vio(
        dataset.imu, dataset.frames, predictor, dataset.camera, noise, vio_cfg, init
    )
    frames_bo = suppress_frames(dataset.frames, start, duration)
    res_bo = run_vio(
        dataset.imu, frames_bo, predictor, dataset.camera, noise, vio_cfg, init
    )
    rep_clean = evaluate(res_clean.trajectory, dataset.ground_truth, alignment)
    rep_bo = evaluate(res_bo.trajectory, dataset.ground_truth, alignment)
    if out_dir is not None:
        import os

        from .dataio import write_trajectory

        os.makedirs(out_dir, exist_ok=True)
        write_trajectory(os.path.join(out_dir, "trajectory_clean.txt"), res_clean.trajectory)
        write_trajectory(
            os.path.join(out_dir, f"trajectory_blackout_{duration:g}s.txt"),
            res_bo.trajectory,
        )
    return BlackoutResult(
        rep_clean, rep_bo, res_clean.trajectory, res_bo.trajectory,
        res_clean.diagnostics, res_bo.diagnostics,
    )
