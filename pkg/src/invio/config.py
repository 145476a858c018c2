"""Strict YAML configuration loading.

Unknown keys are rejected with their full field path.  All physical
quantities carry the units documented next to each field; defaults follow
the EuRoC noise column and the reference filter/training settings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .biasnet import TrainConfig
from .dataio import CameraModel, TrajectorySpec
from .errors import ConfigError, InvalidArgumentError
from .inertial import NoiseParams
from .msckf import VioConfig

# field name -> (target attribute, converter) per section
_NOISE_KEYS = {
    "sigma_g": float,      # rad/s/sqrt(Hz)
    "sigma_bg": float,     # rad/s^2/sqrt(Hz)
    "sigma_a": float,      # m/s^2/sqrt(Hz)
    "sigma_ba": float,     # m/s^3/sqrt(Hz)
    "sigma_v": float,      # m/s/sqrt(Hz), velocity pseudo-noise
    "gravity": lambda v: np.asarray(v, dtype=float),  # m/s^2, world frame
}
_FILTER_KEYS = {
    "window": int,
    "gating": bool,
    "gate_confidence": float,
    "min_track_obs": int,
    "max_gn_iterations": int,
    "min_baseline": float,          # m
    "init_cov_rotation": float,     # rad^2
    "init_cov_velocity": float,     # (m/s)^2
    "init_cov_position": float,     # m^2
    "imu_gap_factor": float,
    "max_update_tracks": int,
}
_TRAIN_KEYS = {
    "learning_rate": float,
    "epochs": int,
    "batch_size": int,
    "huber_delta": float,
    "weight_rotation": float,
    "weight_position": float,
    "weight_velocity": float,
    "window": int,
    "seed": int,
    "loss_kind": str,
    "huber_per_component": bool,
}
_CAMERA_KEYS = {
    "fx": float,  # px
    "fy": float,  # px
    "cx": float,  # px
    "cy": float,  # px
    "body_to_camera_rotation": lambda v: np.asarray(v, dtype=float),
    "body_to_camera_translation": lambda v: np.asarray(v, dtype=float),
    "sigma_px": float,  # px
    "image_width": int,
    "image_height": int,
}
_SPEC_KEYS = {
    "primitive": str,
    "amplitude": float,        # m
    "angular_rate": float,     # rad/s
    "duration": float,         # s
    "imu_rate": float,         # Hz
    "camera_rate": float,      # Hz
    "bias_profile": str,
    "bias_constant": lambda v: np.asarray(v, dtype=float),
    "bias_drift_rate": lambda v: np.asarray(v, dtype=float),
    "add_noise": bool,
    "rotation_amplitude": float,  # rad
    "rotation_rate": float,       # rad/s
    "landmark_count": int,
    "landmark_center": lambda v: np.asarray(v, dtype=float),
    "landmark_extent": lambda v: np.asarray(v, dtype=float),
    "seed": int,
}


@dataclass
class RunConfig:
    noise: NoiseParams = field(default_factory=NoiseParams)
    vio: VioConfig = field(default_factory=VioConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    camera: CameraModel = field(default_factory=CameraModel)
    seed: int = 0

    def echo(self) -> dict:
        """JSON-friendly view recorded in output manifests."""

        def clean(obj):
            out = {}
            for k, v in vars(obj).items():
                if isinstance(v, np.ndarray):
                    out[k] = v.tolist()
                elif isinstance(v, (int, float, str, bool)):
                    out[k] = v
            return out

        return {
            "seed": self.seed,
            "noise": clean(self.noise),
            "filter": clean(self.vio),
            "training": clean(self.train),
            "camera": clean(self.camera),
        }


def _apply_section(obj, section: dict, keys: dict, path: str):
    for name, value in section.items():
        if name not in keys:
            raise ConfigError(f"unknown key (known: {', '.join(sorted(keys))})",
                              field=f"{path}.{name}")
        conv = keys[name]
        try:
            setattr(obj, name, conv(value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value {value!r}: {exc}", field=f"{path}.{name}")
    # re-run dataclass validation
    try:
        obj.__post_init__()
    except AttributeError:
        pass
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), field=path)
    return obj


def _load_yaml(path) -> dict:
    try:
        with open(path, "r") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}", field=str(path))
    except OSError as exc:
        raise ConfigError(str(exc), field=str(path))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", field=str(path))
    return data


def load_config(path=None) -> RunConfig:
    """Load a run configuration; missing file sections fall back to defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg
    data = _load_yaml(path)
    sections = {
        "noise": (cfg.noise, _NOISE_KEYS),
        "filter": (cfg.vio, _FILTER_KEYS),
        "training": (cfg.train, _TRAIN_KEYS),
        "camera": (cfg.camera, _CAMERA_KEYS),
    }
    for name, value in data.items():
        if name == "seed":
            cfg.seed = int(value)
            continue
        if name not in sections:
            raise ConfigError(
                f"unknown section (known: seed, {', '.join(sorted(sections))})",
                field=name,
            )
        obj, keys = sections[name]
        if not isinstance(value, dict):
            raise ConfigError("section must be a mapping", field=name)
        _apply_section(obj, value, keys, name)
    return cfg


def load_trajectory_spec(path) -> TrajectorySpec:
    """Load a synthetic-world spec; nested noise/camera sections allowed."""
    data = _load_yaml(path)
    spec = TrajectorySpec()
    nested = {}
    for key in ("noise", "camera"):
        if key in data:
            nested[key] = data.pop(key)
            if not isinstance(nested[key], dict):
                raise ConfigError("section must be a mapping", field=key)
    _apply_section(spec, data, _SPEC_KEYS, "spec")
    if "noise" in nested:
        _apply_section(spec.noise, nested["noise"], _NOISE_KEYS, "noise")
    if "camera" in nested:
        _apply_section(spec.camera, nested["camera"], _CAMERA_KEYS, "camera")
    spec.__post_init__()
    return spec
