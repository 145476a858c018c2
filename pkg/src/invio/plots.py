"""Figure rendering for the CLI report paths (Agg backend, PNG files)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def trajectory_topdown(path, est, gt=None, title="trajectory (top-down)"):
    """XY plot of an estimated trajectory, optionally against ground truth."""
    fig, ax = plt.subplots(figsize=(6, 6))
    P = np.array([pose.position for _, pose in est])
    ax.plot(P[:, 0], P[:, 1], "-", lw=1.2, label="estimate")
    if gt:
        G = np.array([pose.position for _, pose in gt])
        ax.plot(G[:, 0], G[:, 1], "--", lw=1.0, label="ground truth")
    ax.plot(P[0, 0], P[0, 1], "ko", ms=5, label="start")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    ax.set_title(title)
    return _save(fig, path)


def loss_curve(path, history):
    """Training/validation loss per epoch on a log scale."""
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [h["epoch"] for h in history]
    ax.plot(epochs, [h["train_loss"] for h in history], "-o", ms=3, label="train")
    vals = [h["val_loss"] for h in history]
    if any(np.isfinite(v) for v in vals):
        ax.plot(epochs, vals, "-s", ms=3, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("rollout loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3, which="both")
    ax.legend()
    return _save(fig, path)


def ate_vs_duration(path, durations, ate_by_label):
    """Translational ATE against blackout duration, one line per estimator."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in ate_by_label.items():
        ax.plot(durations, values, "-o", ms=4, label=label)
    ax.set_xlabel("blackout duration [s]")
    ax.set_ylabel("ATE translation [m]")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def error_over_time(path, times, errors, ylabel="position error [m]"):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(times, errors, lw=0.9)
    ax.set_xlabel("time [s]")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def relative_error_boxes(path, relative_errors):
    """Box plot of relative-error samples per traveled-distance fraction."""
    fig, ax = plt.subplots(figsize=(6, 4))
    labels, data = [], []
    for frac in sorted(relative_errors):
        rep = relative_errors[frac]
        if rep.available:
            labels.append(f"{100 * frac:g}%")
            data.append(rep.samples)
    if data:
        ax.boxplot(data, tick_labels=labels, showfliers=False)
    ax.set_xlabel("traveled distance")
    ax.set_ylabel("relative translation error [m]")
    ax.grid(alpha=0.3, axis="y")
    return _save(fig, path)
