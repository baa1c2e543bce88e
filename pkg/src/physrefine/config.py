"""Run configuration: one TOML file drives every verb, flags override."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .camera import CameraIntrinsics
from .cycle import CycleConfig
from .networks import CausalConvNetConfig
from .projection import FloorModel
from .training import Schedule


class BadConfig(ValueError):
    """Configuration file missing, malformed, or inconsistent."""


@dataclass
class RunConfig:
    intrinsics: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(900.0, 900.0, 500.0, 500.0))
    image_size: tuple = (1000, 1000)
    floor: FloorModel = field(default_factory=FloorModel.identity)
    skeleton_path: str = None  # None: bundled humanoid
    checkpoint_path: str = None
    fps: float = 30.0
    window: int = 10
    conv_channels: int = 128
    fc_hidden: int = 512
    seed: int = 0
    cycle: CycleConfig = field(default_factory=CycleConfig)
    schedule: Schedule = field(default_factory=Schedule)
    kp_ini: np.ndarray = None  # None: inertia-scaled defaults
    confidence_threshold: float = 0.2

    def conv_config(self) -> CausalConvNetConfig:
        return CausalConvNetConfig(window=self.window, channels=self.conv_channels)


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise BadConfig(f"{where}: missing key {key!r}")
    return table[key]


def load_config(path, overrides: dict = None) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise BadConfig(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise BadConfig(f"{path}: {e}") from None
    cfg = RunConfig()
    if "camera" in raw:
        cam = raw["camera"]
        try:
            cfg.intrinsics = CameraIntrinsics(
                float(_require(cam, "fx", "camera")),
                float(_require(cam, "fy", "camera")),
                float(_require(cam, "cx", "camera")),
                float(_require(cam, "cy", "camera")),
            )
        except ValueError as e:
            raise BadConfig(f"{path}: camera: {e}") from None
        if "image_width" in cam:
            cfg.image_size = (int(cam["image_width"]), int(cam["image_height"]))
    if "floor" in raw:
        fl = raw["floor"]
        point = np.asarray(_require(fl, "point", "floor"), dtype=np.float64)
        normal = np.asarray(_require(fl, "normal", "floor"), dtype=np.float64)
        if point.shape != (3,) or normal.shape != (3,):
            raise BadConfig(f"{path}: floor point/normal must be 3-vectors")
        if np.linalg.norm(normal) < 1e-12:
            raise BadConfig(f"{path}: floor normal must be nonzero")
        cfg.floor = FloorModel.from_point_normal(point, normal)
    if "skeleton" in raw:
        cfg.skeleton_path = raw["skeleton"].get("path")
    if "checkpoints" in raw:
        cfg.checkpoint_path = raw["checkpoints"].get("path")
    if "run" in raw:
        run = raw["run"]
        cfg.fps = float(run.get("fps", cfg.fps))
        cfg.seed = int(run.get("seed", cfg.seed))
        cfg.confidence_threshold = float(run.get("confidence_threshold", cfg.confidence_threshold))
        if cfg.fps <= 0:
            raise BadConfig(f"{path}: run.fps must be positive")
    if "networks" in raw:
        net = raw["networks"]
        cfg.window = int(net.get("window", cfg.window))
        cfg.conv_channels = int(net.get("conv_channels", cfg.conv_channels))
        cfg.fc_hidden = int(net.get("fc_hidden", cfg.fc_hidden))
    if "cycle" in raw:
        cy = raw["cycle"]
        cfg.cycle = CycleConfig(
            substeps=int(cy.get("substeps", 6)),
            gamma=float(cy.get("gamma", 10.0)),
            contact_threshold=float(cy.get("contact_threshold", 0.5)),
            networks_per_substep=bool(cy.get("networks_per_substep", True)),
            distance_activation=bool(cy.get("distance_activation", False)),
            activation_distance=float(cy.get("activation_distance", 0.01)),
            margin=float(cy.get("margin", 0.0)),
            kd_mode=str(cy.get("kd_mode", "critical")),
            kd_scale=float(cy.get("kd_scale", 2.0)),
            integration=str(cy.get("integration", "stable_pd")),
            mu=float(cy.get("mu", 0.8)),
        )
        if cfg.cycle.substeps < 1:
            raise BadConfig(f"{path}: cycle.substeps must be >= 1")
        if cfg.cycle.kd_mode not in ("critical", "sqrt"):
            raise BadConfig(f"{path}: cycle.kd_mode must be 'critical' or 'sqrt'")
        if cfg.cycle.integration not in ("stable_pd", "implicit_kd", "explicit"):
            raise BadConfig(f"{path}: cycle.integration must be stable_pd, implicit_kd or explicit")
        if "kp_ini" in cy:
            cfg.kp_ini = np.asarray(cy["kp_ini"], dtype=np.float64)
    if "training" in raw:
        tr = raw["training"]
        try:
            cfg.schedule = Schedule(
                lr_pretrain=float(tr.get("lr_pretrain", 3.0e-6)),
                lr_joint=float(tr.get("lr_joint", 3.0e-7)),
                patience=int(tr.get("patience", 20)),
                batch_size=int(tr.get("batch_size", 32)),
                epochs_pose=int(tr.get("epochs_pose", 30)),
                epochs_trans=int(tr.get("epochs_trans", 30)),
                epochs_gain=int(tr.get("epochs_gain", 15)),
                epochs_force=int(tr.get("epochs_force", 30)),
                epochs_joint=int(tr.get("epochs_joint", 10)),
                seed=int(tr.get("seed", cfg.seed)),
            )
        except ValueError as e:
            raise BadConfig(f"{path}: training: {e}") from None
    for key, value in (overrides or {}).items():
        if not hasattr(cfg, key):
            raise BadConfig(f"unknown override {key!r}")
        setattr(cfg, key, value)
    return cfg
