"""Pipeline configuration: INI-style files with [section] / key = value lines.

Defaults reproduce the reference operating point: MVDR beamforming on a
0..12 m x [-90, 90] deg x [-10, 30] deg spherical grid (96 x 64 x 64
bins), CFAR with design Pfa 1e-3, the annotation thresholds (ground
0.3 m, ego 2 m, clustering 0.7 m, L 0.2..8 m, W/H 0.5..3 m, L/W 0.5..5,
L/H >= 0.4), the two-sensor extrinsics, and Adam training for 20 epochs
at LR 1e-4 with a 0.3 drop every 10 epochs.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

import numpy as np

from .annotation import AnnotationParams, FilterRules, RoiSpec
from .geometry import RigidTransform, SphericalGrid, VoxelGrid
from .scene import ArrayGeometry, planar_array_positions
from .unet import TrainConfig
from .volume import CfarParams


class ConfigError(ValueError):
    """Invalid configuration; carries the offending field name."""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class PipelineConfig:
    # [grid]
    r_min: float = 0.0
    r_max: float = 12.0
    r_step: float = 0.125
    theta_min_deg: float = -90.0
    theta_max_deg: float = 90.0
    theta_bins: int = 64
    phi_min_deg: float = -10.0
    phi_max_deg: float = 30.0
    phi_bins: int = 64
    # [voxel]
    x_min: float = -12.0
    x_max: float = 12.0
    y_min: float = -2.0
    y_max: float = 6.0
    z_min: float = 0.0
    z_max: float = 12.0
    height: int = 64
    depth: int = 96
    width: int = 64
    # [beamforming]
    method: str = "mvdr"
    loading_factor: float = 0.01
    snapshot_stride: int = 8
    interpolate: bool = False
    # [cfar]
    cfar_enabled: bool = True
    training_cells: int = 8
    guard_cells: int = 2
    design_pfa: float = 1e-3
    # [annotation]
    ground_distance: float = 0.3
    ego_radius: float = 2.0
    cluster_threshold: float = 0.7
    min_cluster_points: int = 5
    l_min: float = 0.2
    l_max: float = 8.0
    w_min: float = 0.5
    w_max: float = 3.0
    h_min: float = 0.5
    h_max: float = 3.0
    lw_ratio_min: float = 0.5
    lw_ratio_max: float = 5.0
    lh_ratio_min: float = 0.4
    # [extrinsics] sensor poses relative to the LiDAR frame; theta is a
    # compass-style heading about the down axis from +x (boresight forward
    # is -90), phi tilts the boresight up
    left_x: float = -0.8
    left_y: float = -1.5
    left_z: float = 2.5
    left_theta_deg: float = -135.0
    left_phi_deg: float = 5.0
    right_x: float = 0.8
    right_y: float = -1.5
    right_z: float = 2.5
    right_theta_deg: float = -45.0
    right_phi_deg: float = 5.0
    # [array]
    carrier_freq: float = 40_000.0
    sample_rate: float = 240_000.0
    sound_speed: float = 343.0
    elements_azimuth: int = 8
    elements_elevation: int = 4
    # [scene]
    frames: int = 8
    seed: int = 0
    empty_fraction: float = 0.25
    max_boxes: int = 2
    scatterers_per_box: int = 12
    points_per_box: int = 400
    ground_points: int = 600
    ground_height: float = -1.8
    pulse_cycles: int = 8
    noise_std: float = 1e-3
    # [training]
    max_epochs: int = 20
    batch_size: int = 1
    initial_lr: float = 1e-4
    lr_drop_period: int = 10
    lr_drop_factor: float = 0.3
    shuffle: bool = True
    base_channels: int = 16
    dtype: str = "float32"
    filter_empty: bool = True
    train_fraction: float = 0.8
    train_seed: int = 0

    # --- typed views -----------------------------------------------------

    def spherical_grid(self) -> SphericalGrid:
        return SphericalGrid(
            r_min=self.r_min, r_max=self.r_max, r_step=self.r_step,
            theta_bounds=(np.deg2rad(self.theta_min_deg), np.deg2rad(self.theta_max_deg)),
            theta_bins=self.theta_bins,
            phi_bounds=(np.deg2rad(self.phi_min_deg), np.deg2rad(self.phi_max_deg)),
            phi_bins=self.phi_bins)

    def voxel_grid(self) -> VoxelGrid:
        return VoxelGrid(x_bounds=(self.x_min, self.x_max), y_bounds=(self.y_min, self.y_max),
                         z_bounds=(self.z_min, self.z_max), dims=(self.height, self.depth, self.width))

    def array_geometry(self) -> ArrayGeometry:
        pos = planar_array_positions(self.elements_azimuth, self.elements_elevation,
                                     carrier_freq=self.carrier_freq, sound_speed=self.sound_speed)
        return ArrayGeometry(element_positions=pos, carrier_freq=self.carrier_freq,
                             sample_rate=self.sample_rate, sound_speed=self.sound_speed)

    def cfar_params(self) -> CfarParams:
        return CfarParams(training_cells=self.training_cells, guard_cells=self.guard_cells,
                          design_pfa=self.design_pfa)

    def annotation_params(self, seed: int | None = None) -> AnnotationParams:
        return AnnotationParams(
            roi=RoiSpec(x_bounds=(self.x_min, self.x_max), y_bounds=(self.y_min, self.y_max),
                        z_bounds=(self.z_min, self.z_max)),
            rules=FilterRules(l_bounds=(self.l_min, self.l_max), w_bounds=(self.w_min, self.w_max),
                              h_bounds=(self.h_min, self.h_max),
                              lw_ratio_bounds=(self.lw_ratio_min, self.lw_ratio_max),
                              lh_ratio_min=self.lh_ratio_min),
            ground_distance=self.ground_distance, ego_radius=self.ego_radius,
            cluster_threshold=self.cluster_threshold, min_cluster_points=self.min_cluster_points,
            seed=self.seed if seed is None else seed)

    def train_config(self, filter_empty: bool | None = None, seed: int | None = None) -> TrainConfig:
        del filter_empty  # filtering happens at dataset assembly, not in the loop
        return TrainConfig(
            max_epochs=self.max_epochs, batch_size=self.batch_size, initial_lr=self.initial_lr,
            lr_drop_period=self.lr_drop_period, lr_drop_factor=self.lr_drop_factor,
            shuffle=self.shuffle, seed=self.train_seed if seed is None else seed,
            base_channels=self.base_channels, dtype=self.dtype)

    def sensor_poses(self) -> list[tuple[str, RigidTransform]]:
        """Sensor-to-world transforms for the left and right units."""
        out = []
        for name, x, y, z, theta, phi in (
                ("L", self.left_x, self.left_y, self.left_z, self.left_theta_deg, self.left_phi_deg),
                ("R", self.right_x, self.right_y, self.right_z, self.right_theta_deg, self.right_phi_deg)):
            yaw = np.deg2rad(theta + 90.0)  # heading -90 means boresight along +z
            pitch = np.deg2rad(phi)
            out.append((name, RigidTransform.from_yaw_pitch((x, y, z), yaw=yaw, pitch=pitch)))
        return out


_SECTIONS: dict[str, tuple[str, ...]] = {
    "grid": ("r_min", "r_max", "r_step", "theta_min_deg", "theta_max_deg", "theta_bins",
             "phi_min_deg", "phi_max_deg", "phi_bins"),
    "voxel": ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max", "height", "depth", "width"),
    "beamforming": ("method", "loading_factor", "snapshot_stride", "interpolate"),
    "cfar": ("cfar_enabled", "training_cells", "guard_cells", "design_pfa"),
    "annotation": ("ground_distance", "ego_radius", "cluster_threshold", "min_cluster_points",
                   "l_min", "l_max", "w_min", "w_max", "h_min", "h_max",
                   "lw_ratio_min", "lw_ratio_max", "lh_ratio_min"),
    "extrinsics": ("left_x", "left_y", "left_z", "left_theta_deg", "left_phi_deg",
                   "right_x", "right_y", "right_z", "right_theta_deg", "right_phi_deg"),
    "array": ("carrier_freq", "sample_rate", "sound_speed", "elements_azimuth", "elements_elevation"),
    "scene": ("frames", "seed", "empty_fraction", "max_boxes", "scatterers_per_box",
              "points_per_box", "ground_points", "ground_height", "pulse_cycles", "noise_std"),
    "training": ("max_epochs", "batch_size", "initial_lr", "lr_drop_period", "lr_drop_factor",
                 "shuffle", "base_channels", "dtype", "filter_empty", "train_fraction", "train_seed"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(name, f"cannot parse {raw!r} ({exc})") from None


def load_config(path=None) -> PipelineConfig:
    """Defaults, overridden by an optional INI file; unknown keys are errors."""
    cfg = PipelineConfig()
    if path is None:
        return validate_config(cfg)
    parser = configparser.ConfigParser()
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigError("config", f"cannot read {path}")
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(section, "unknown config section")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{section}.{key}", "unknown config key")
            setattr(cfg, key, _parse_value(key, raw))
    return validate_config(cfg)


def validate_config(cfg: PipelineConfig) -> PipelineConfig:
    def check(cond: bool, name: str, message: str) -> None:
        if not cond:
            raise ConfigError(name, message)

    check(cfg.method in ("das", "mvdr"), "beamforming.method", "must be 'das' or 'mvdr'")
    check(cfg.r_step > 0 and cfg.r_max > cfg.r_min, "grid.r_step", "range span must be positive")
    n = (cfg.r_max - cfg.r_min) / cfg.r_step
    check(abs(n - round(n)) < 1e-9, "grid.r_step", "range span must be a whole number of bins")
    check(cfg.theta_bins > 0 and cfg.phi_bins > 0, "grid.theta_bins", "bin counts must be positive")
    check(cfg.height > 0 and cfg.depth > 0 and cfg.width > 0, "voxel.height", "dims must be positive")
    check(cfg.sample_rate > 2 * cfg.carrier_freq, "array.sample_rate",
          "must exceed twice the carrier frequency")
    check(0 < cfg.design_pfa < 1, "cfar.design_pfa", "must lie in (0, 1)")
    check(cfg.training_cells >= 1, "cfar.training_cells", "must be >= 1")
    check(cfg.guard_cells >= 0, "cfar.guard_cells", "must be >= 0")
    check(0 < cfg.train_fraction < 1, "training.train_fraction", "must lie in (0, 1)")
    check(cfg.dtype in ("float32", "float64"), "training.dtype", "must be float32 or float64")
    check(cfg.batch_size == 1, "training.batch_size", "only mini-batch size 1 is implemented")
    check(0 <= cfg.empty_fraction <= 1, "scene.empty_fraction", "must lie in [0, 1]")
    check(cfg.frames >= 1, "scene.frames", "must be >= 1")
    check(cfg.pulse_cycles >= 1, "scene.pulse_cycles", "must be >= 1")
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    """Effective configuration as INI text; re-loading it reproduces cfg."""
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(cfg, key)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
