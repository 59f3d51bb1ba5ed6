"""Run configuration: INI-style [section] key=value text with strict keys.

Unknown sections or keys are hard errors; every key has a typed default,
so a minimal config only overrides what differs from the desk-scale
defaults.  Booleans accept true/false, lists are comma-separated.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

from .bev import GridSpec
from .distill import LossWeights
from .geometry import FrustumSpec, uniform_depth_bins
from .models import ModelSpec
from .synthworld import LidarScan


class ConfigError(ValueError):
    """Configuration file is malformed or inconsistent."""


@dataclass
class RunConfig:
    # [run]
    seed: int = 0
    out_dir: str = "runs/default"

    # [dataset]
    dataset_dir: str = "data/desk"
    train_scenes: int = 200
    val_scenes: int = 50
    n_boxes: int = 6
    class_count: int = 3
    max_center_range: float = 24.0

    # [images]
    image_height: int = 64
    image_width: int = 176

    # [rig]
    cameras: int = 6
    fov_deg: float = 70.0
    camera_height: float = 1.5
    camera_radius: float = 1.0
    lidar_height: float = 1.8

    # [lidar]
    rings: int = 16
    azimuth_step_deg: float = 0.5
    elevation_min_deg: float = -14.0
    elevation_max_deg: float = 2.0
    lidar_max_range: float = 70.0

    # [grid]
    x_min: float = -32.0
    x_max: float = 32.0
    y_min: float = -32.0
    y_max: float = 32.0
    grid_rows: int = 64
    grid_cols: int = 64
    z_min: float = -3.0
    z_max: float = 5.0

    # [frustum]
    depth_bins: int = 16
    depth_min: float = 1.0
    depth_max: float = 60.0

    # [masks]
    mask_sigma: float = 2.0
    remove_ground: bool = False
    ground_z_max: float = 0.15

    # [teacher]
    teacher_widths: tuple = (32, 64, 96)
    teacher_channels: int = 16
    teacher_decoder: tuple = (32, 32)
    teacher_epochs: int = 30
    teacher_lr: float = 2e-3
    teacher_weight_decay: float = 1e-7
    teacher_batch: int = 4

    # [student]
    student_widths: tuple = (8, 16, 24)
    student_channels: int = 16
    student_decoder: tuple = (24,)
    student_epochs: int = 40
    student_lr: float = 3e-3
    student_weight_decay: float = 1e-7
    student_batch: int = 4

    # [distill]
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    temperature: float = 4.0
    soft: bool = True
    depth: bool = True
    bev: bool = True
    foreground_mask: bool = True
    view_mask: bool = True
    soft_label_distance: str = "bce"
    soft_weight: float = 1.0

    # [loss]
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    sil_weight: float = 1.0
    scale_anchor_weight: float = 0.5
    coarse_weight: float = 1.0
    heatmap_sigma_gain: float = 0.1667

    # [eval]
    score_threshold: float = 0.2
    max_detections: int = 24

    # -- derived objects -----------------------------------------------------

    def grid(self) -> GridSpec:
        return GridSpec(self.x_min, self.x_max, self.y_min, self.y_max,
                        self.grid_rows, self.grid_cols)

    def frustum(self) -> FrustumSpec:
        return FrustumSpec(self.image_height // 4, self.image_width // 4,
                           uniform_depth_bins(self.depth_min, self.depth_max, self.depth_bins))

    def feature_size(self) -> tuple[int, int]:
        return self.image_height // 4, self.image_width // 4

    def scan(self) -> LidarScan:
        return LidarScan.default(self.rings, self.azimuth_step_deg,
                                 self.elevation_min_deg, self.elevation_max_deg,
                                 self.lidar_max_range)

    def model_spec(self, role: str) -> ModelSpec:
        if role == "teacher":
            widths, chans, dec = self.teacher_widths, self.teacher_channels, self.teacher_decoder
        else:
            widths, chans, dec = self.student_widths, self.student_channels, self.student_decoder
        return ModelSpec(role=role, backbone_widths=tuple(widths), feature_channels=chans,
                         feature_size=self.feature_size(), depth_bins=self.depth_bins,
                         decoder_widths=tuple(dec), heatmap_classes=self.class_count)

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma,
                           temperature=self.temperature,
                           focal_alpha=self.focal_alpha, focal_beta=self.focal_beta)

    def z_range(self) -> tuple[float, float]:
        if self.remove_ground:
            return (self.ground_z_max, self.z_max)
        return (self.z_min, self.z_max)

    def validate(self) -> None:
        if self.image_height % 4 or self.image_width % 4:
            raise ConfigError("image height and width must be multiples of 4")
        if self.train_scenes < 0 or self.val_scenes < 0:
            raise ConfigError("scene counts must be non-negative")
        if self.cameras < 1:
            raise ConfigError("need at least one camera")
        if self.soft_label_distance not in ("bce", "l2"):
            raise ConfigError(f"soft_label_distance must be 'bce' or 'l2', "
                              f"got {self.soft_label_distance!r}")
        try:
            self.grid()
            self.frustum()
            self.model_spec("teacher")
            self.model_spec("student")
            self.loss_weights()
        except ValueError as e:
            raise ConfigError(str(e)) from e


# maps [section] -> {key in file: attribute on RunConfig}
_SCHEMA = {
    "run": {"seed": "seed", "out_dir": "out_dir"},
    "dataset": {"dir": "dataset_dir", "train_scenes": "train_scenes",
                "val_scenes": "val_scenes", "n_boxes": "n_boxes",
                "class_count": "class_count", "max_center_range": "max_center_range"},
    "images": {"height": "image_height", "width": "image_width"},
    "rig": {"cameras": "cameras", "fov_deg": "fov_deg", "camera_height": "camera_height",
            "camera_radius": "camera_radius", "lidar_height": "lidar_height"},
    "lidar": {"rings": "rings", "azimuth_step_deg": "azimuth_step_deg",
              "elevation_min_deg": "elevation_min_deg",
              "elevation_max_deg": "elevation_max_deg", "max_range": "lidar_max_range"},
    "grid": {"x_min": "x_min", "x_max": "x_max", "y_min": "y_min", "y_max": "y_max",
             "rows": "grid_rows", "cols": "grid_cols", "z_min": "z_min", "z_max": "z_max"},
    "frustum": {"depth_bins": "depth_bins", "depth_min": "depth_min", "depth_max": "depth_max"},
    "masks": {"sigma": "mask_sigma", "remove_ground": "remove_ground",
              "ground_z_max": "ground_z_max"},
    "teacher": {"widths": "teacher_widths", "channels": "teacher_channels",
                "decoder": "teacher_decoder", "epochs": "teacher_epochs",
                "lr": "teacher_lr", "weight_decay": "teacher_weight_decay",
                "batch": "teacher_batch"},
    "student": {"widths": "student_widths", "channels": "student_channels",
                "decoder": "student_decoder", "epochs": "student_epochs",
                "lr": "student_lr", "weight_decay": "student_weight_decay",
                "batch": "student_batch"},
    "distill": {"alpha": "alpha", "beta": "beta", "gamma": "gamma",
                "temperature": "temperature", "soft": "soft", "depth": "depth",
                "bev": "bev", "foreground_mask": "foreground_mask",
                "view_mask": "view_mask", "soft_label_distance": "soft_label_distance",
                "soft_weight": "soft_weight"},
    "loss": {"focal_alpha": "focal_alpha", "focal_beta": "focal_beta",
             "sil_weight": "sil_weight", "scale_anchor_weight": "scale_anchor_weight",
             "coarse_weight": "coarse_weight",
             "heatmap_sigma_gain": "heatmap_sigma_gain"},
    "eval": {"score_threshold": "score_threshold", "max_detections": "max_detections"},
}

_BOOL = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}


def _parse_value(raw: str, kind, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in _BOOL:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return _BOOL[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(part.strip()) for part in raw.split(",") if part.strip())
        return raw
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from e


def load_config(path) -> RunConfig:
    """Parse and validate a config file against the defaults and schema."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    cfg = RunConfig()
    types = {f.name: type(getattr(cfg, f.name)) for f in fields(RunConfig)}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key '{key}' in section [{section}]")
            attr = _SCHEMA[section][key]
            value = _parse_value(raw, types[attr], f"{path}: [{section}] {key}")
            setattr(cfg, attr, value)
    cfg.validate()
    return cfg


def save_config(path, cfg: RunConfig) -> None:
    """Write every setting grouped by section (a complete, reloadable file)."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, attr in keys.items():
            value = getattr(cfg, attr)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")
