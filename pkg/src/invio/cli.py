"""Command-line entry point: simulate | train | run | eval | blackout.

Every command is deterministic under a fixed seed and fixed inputs, and
records a manifest (seed, configuration echo, version) next to its outputs.
Report paths emit delimited data files plus rendered PNG figures.

Exit codes: 0 success, 2 config/argument errors, 3 data errors, 4 numeric
errors, 5 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .biasnet import (
    load_checkpoint,
    save_checkpoint,
    segments_from_dataset,
    train as train_net,
)
from .config import load_config, load_trajectory_spec
from .dataio import (
    load_euroc,
    load_tracks,
    read_trajectory,
    synthesize,
    write_euroc,
    write_tracks,
    write_trajectory,
)
from .errors import (
    ConfigError,
    DataFormatError,
    InsufficientDataError,
    InvalidArgumentError,
    NumericError,
    TrainingDivergedError,
)
from .evaluation import ate, blackout_harness, evaluate
from .msckf import NetworkBiasPredictor, run_vio


def _write_manifest(out_dir, command, seed, config_echo):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "seed": seed,
        "config": config_echo,
        "version": __version__,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_dataset_with_tracks(data_dir):
    ds = load_euroc(data_dir)
    tracks_path = os.path.join(data_dir, "tracks.txt")
    if not os.path.exists(tracks_path):
        raise DataFormatError("tracks file not found", path=tracks_path)
    frames, _ = load_tracks(tracks_path)
    ds.frames = frames
    return ds


def _predictor_from_args(args):
    if getattr(args, "zero_bias", False):
        return None
    if not getattr(args, "checkpoint", None):
        raise ConfigError("either --checkpoint or --zero-bias is required")
    return NetworkBiasPredictor(load_checkpoint(args.checkpoint))


def cmd_simulate(args) -> int:
    spec = load_trajectory_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    ds, bias = synthesize(spec)
    out = args.out
    os.makedirs(out, exist_ok=True)
    write_euroc(out, ds, bias)
    write_tracks(os.path.join(out, "tracks.txt"), ds.frames)
    with open(os.path.join(out, "true_bias.txt"), "w") as fh:
        for s, b in zip(ds.imu, bias):
            fh.write(f"{s.t:.9f} " + " ".join(f"{x:.12g}" for x in b) + "\n")
    write_trajectory(os.path.join(out, "groundtruth_tum.txt"), ds.ground_truth)
    from . import plots

    plots.trajectory_topdown(
        os.path.join(out, "dataset_preview.png"), ds.ground_truth, title="ground truth"
    )
    spec_echo = {
        k: (v.tolist() if isinstance(v, np.ndarray) else v)
        for k, v in vars(spec).items()
        if isinstance(v, (int, float, str, bool, np.ndarray))
    }
    _write_manifest(out, "simulate", spec.seed, {"spec": spec_echo})
    print(f"wrote dataset to {out} ({len(ds.imu)} IMU samples, {len(ds.frames)} frames)")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    train_segments = []
    for d in args.train_dir:
        train_segments += segments_from_dataset(load_euroc(d), cfg.train.window)
    val_segments = []
    for d in args.val_dir or []:
        val_segments += segments_from_dataset(load_euroc(d), cfg.train.window)
    if not train_segments:
        raise DataFormatError("no usable training segments", path=";".join(args.train_dir))

    net = None
    start_epoch = 0
    trace_rows = []
    trace_path = args.out + ".loss_trace.csv"
    if args.resume:
        if not os.path.exists(args.out):
            raise ConfigError(f"cannot resume: checkpoint {args.out} does not exist")
        net = load_checkpoint(args.out)
        if os.path.exists(trace_path):
            with open(trace_path) as fh:
                rows = fh.read().strip().splitlines()[1:]
            trace_rows = [r for r in rows if r]
            if trace_rows:
                start_epoch = int(trace_rows[-1].split(",")[0]) + 1

    result = train_net(
        train_segments, val_segments, cfg.train, cfg.noise, net=net, start_epoch=start_epoch
    )
    save_checkpoint(result.net, args.out)
    with open(trace_path, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for row in trace_rows:
            fh.write(row + "\n")
        for h in result.history:
            fh.write(f"{h['epoch']},{h['train_loss']:.9g},{h['val_loss']:.9g}\n")
    from . import plots

    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    if result.history:
        plots.loss_curve(args.out + ".loss_curve.png", result.history)
    _write_manifest(out_dir, "train", cfg.train.seed, cfg.echo())
    n_params = result.net.param_count()
    final = result.history[-1] if result.history else {"train_loss": float("nan"), "val_loss": float("nan")}
    print(
        f"trained {n_params} parameters over {len(result.history)} epochs; "
        f"final train loss {final['train_loss']:.6g}, val loss {final['val_loss']:.6g}"
    )
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    ds = _load_dataset_with_tracks(args.data)
    predictor = _predictor_from_args(args)
    init_pose = ds.ground_truth[0][1] if ds.ground_truth else None
    if init_pose is None:
        from .liegroup import ExtendedPose

        init_pose = ExtendedPose.identity()
    result = run_vio(
        ds.imu, ds.frames, predictor, cfg.camera, cfg.noise, cfg.vio, init_pose
    )
    out = args.out
    os.makedirs(out, exist_ok=True)
    write_trajectory(os.path.join(out, "trajectory.txt"), result.trajectory)
    with open(os.path.join(out, "diagnostics.jsonl"), "w") as fh:
        for rec in result.diagnostics:
            fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")
    from . import plots

    gt = ds.ground_truth if ds.ground_truth else None
    plots.trajectory_topdown(os.path.join(out, "trajectory_topdown.png"), result.trajectory, gt)
    _write_manifest(out, "run", cfg.seed, cfg.echo())
    print(f"estimated {len(result.trajectory)} poses -> {out}/trajectory.txt")
    if gt:
        rep = evaluate(result.trajectory, gt)
        for line in rep.lines():
            print(line)
    return 0


def cmd_eval(args) -> int:
    est = read_trajectory(args.est)
    gt = read_trajectory(args.gt)
    rep = evaluate(est, gt, alignment=args.alignment)
    for line in rep.lines():
        print(line)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.json"), "w") as fh:
            json.dump(rep.records(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(args.out, "metrics.txt"), "w") as fh:
            fh.write("\n".join(rep.lines()) + "\n")
        from .evaluation import associate, posyaw_alignment, umeyama_alignment
        from . import plots

        pairs = associate(est, gt)
        P_est = np.array([est[i][1].position for i, _ in pairs])
        P_gt = np.array([gt[j][1].position for _, j in pairs])
        if args.alignment == "SE3":
            R_a, t_a = umeyama_alignment(P_est, P_gt)
        elif args.alignment == "posyaw":
            R_a, t_a = posyaw_alignment(P_est, P_gt)
        else:
            R_a, t_a = np.eye(3), np.zeros(3)
        errs = np.linalg.norm(P_est @ R_a.T + t_a - P_gt, axis=1)
        times = [est[i][0] for i, _ in pairs]
        plots.error_over_time(os.path.join(args.out, "error_over_time.png"), times, errs)
        plots.relative_error_boxes(
            os.path.join(args.out, "relative_error.png"), rep.relative_errors
        )
        _write_manifest(args.out, "eval", 0, {"alignment": args.alignment})
    return 0


def cmd_blackout(args) -> int:
    cfg = load_config(args.config)
    ds = _load_dataset_with_tracks(args.data)
    predictor = _predictor_from_args(args)
    durations = [float(x) for x in args.durations.split(",") if x != ""]
    if not durations:
        raise ConfigError("no blackout durations given")
    out = args.out
    os.makedirs(out, exist_ok=True)
    rows = []
    ate_bo = []
    for dur in durations:
        res = blackout_harness(
            ds, predictor, cfg.vio, cfg.noise,
            blackout=(args.start, dur),
            alignment=args.alignment,
            out_dir=out,
        )
        rows.append(
            (
                dur,
                res.report_clean.ate_translation_m,
                res.report_blackout.ate_translation_m,
                res.report_clean.ate_rotation_deg,
                res.report_blackout.ate_rotation_deg,
            )
        )
        ate_bo.append(res.report_blackout.ate_translation_m)
        print(
            f"duration {dur:g}s: ATE trans {res.report_blackout.ate_translation_m:.6g} m "
            f"(clean {res.report_clean.ate_translation_m:.6g} m)"
        )
    table = os.path.join(out, "blackout_table.tsv")
    with open(table, "w") as fh:
        fh.write(
            "duration_s\tate_trans_clean_m\tate_trans_blackout_m"
            "\tate_rot_clean_deg\tate_rot_blackout_deg\n"
        )
        for row in rows:
            fh.write("\t".join(f"{x:.9g}" for x in row) + "\n")
    from . import plots

    plots.ate_vs_duration(
        os.path.join(out, "ate_vs_duration.png"),
        durations,
        {"blackout": ate_bo, "clean": [r[1] for r in rows]},
    )
    _write_manifest(out, "blackout", cfg.seed, cfg.echo())
    print(f"table written to {table}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="invio",
        description="Invariant visual-inertial odometry with learned IMU bias",
    )
    p.add_argument("--version", action="version", version=f"invio {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="generate a synthetic dataset")
    ps.add_argument("--spec", required=True, help="trajectory spec YAML")
    ps.add_argument("--out", required=True, help="output dataset directory")
    ps.add_argument("--seed", type=int, default=None, help="override spec seed")
    ps.set_defaults(func=cmd_simulate)

    pt = sub.add_parser("train", help="train the bias predictor")
    pt.add_argument("--train-dir", action="append", required=True,
                    help="EuRoC-layout dataset directory (repeatable)")
    pt.add_argument("--val-dir", action="append", default=None,
                    help="validation dataset directory (repeatable)")
    pt.add_argument("--config", default=None, help="run configuration YAML")
    pt.add_argument("--out", required=True, help="output checkpoint path")
    pt.add_argument("--resume", action="store_true",
                    help="continue training from the existing checkpoint")
    pt.add_argument("--seed", type=int, default=None)
    pt.add_argument("--epochs", type=int, default=None, help="override epochs")
    pt.set_defaults(func=cmd_train)

    pr = sub.add_parser("run", help="run visual-inertial odometry")
    pr.add_argument("--data", required=True, help="dataset directory (with tracks.txt)")
    pr.add_argument("--checkpoint", default=None, help="bias predictor checkpoint")
    pr.add_argument("--zero-bias", action="store_true", help="use the zero-bias stub")
    pr.add_argument("--config", default=None)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_run)

    pe = sub.add_parser("eval", help="evaluate a trajectory against ground truth")
    pe.add_argument("--est", required=True, help="estimated trajectory (TUM)")
    pe.add_argument("--gt", required=True, help="ground-truth trajectory (TUM)")
    pe.add_argument("--alignment", default="posyaw", choices=["none", "SE3", "posyaw"])
    pe.add_argument("--out", default=None, help="optional report directory")
    pe.set_defaults(func=cmd_eval)

    pb = sub.add_parser("blackout", help="visual blackout experiment")
    pb.add_argument("--data", required=True)
    pb.add_argument("--checkpoint", default=None)
    pb.add_argument("--zero-bias", action="store_true")
    pb.add_argument("--config", default=None)
    pb.add_argument("--start", type=float, required=True, help="blackout start [s]")
    pb.add_argument("--durations", default="1,2,3,4", help="comma-separated seconds")
    pb.add_argument("--alignment", default="posyaw", choices=["none", "SE3", "posyaw"])
    pb.add_argument("--out", required=True)
    pb.set_defaults(func=cmd_blackout)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, InsufficientDataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
