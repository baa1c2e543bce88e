"""Synthetic motion generator: kinematically consistent training sequences.

Each family scripts joint-angle and root trajectories on the skeleton, runs
forward kinematics for exact 3D joints, projects them for exact 2D labels,
and derives contact labels from foot-site height and speed thresholds. The
observed keypoints (the pipeline input) optionally carry pixel noise; the
label channels stay exact, so every sample satisfies the projection
consistency guarantee by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, project
from .projection import FloorModel
from .skeleton import SkeletonModel, contact_site_positions, forward_kinematics
from .spatial import RigidTransform, UnitQuaternion

CONTACT_HEIGHT_M = 0.005  # site below this height counts as touching
CONTACT_SPEED_M_PER_FRAME = 0.02  # and moving slower than this per frame

FAMILIES = ("standing", "squat", "gait", "hop")


@dataclass(frozen=True)
class SideCamera:
    """Second calibrated view for held-out reprojection checks."""

    intrinsics: CameraIntrinsics
    extrinsic: RigidTransform  # main-camera frame -> side-camera frame


@dataclass
class GeneratorConfig:
    family: str = "standing"
    n_frames: int = 90
    fps: float = 30.0
    intrinsics: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(900.0, 900.0, 500.0, 500.0))
    image_size: tuple = (1000, 1000)
    noise_px: float = 0.0
    seed: int = 0
    subject_distance: float = 3.5
    lateral_offset: float = 0.0
    period_frames: int = 40
    amplitude: float = 1.0  # family-specific scale knob
    side_camera: bool = False


@dataclass
class TrainingSample:
    """One generated sequence with every label the losses consume."""

    q: np.ndarray  # (T, n_q) ground-truth poses
    joints3d: np.ndarray  # (T, M, 3) camera frame, metres
    pixels2d: np.ndarray  # (T, M, 2) exact projections, pixels
    pixels2d_observed: np.ndarray  # (T, M, 2) with observation noise
    contacts: np.ndarray  # (T, 4) binary
    intrinsics: CameraIntrinsics
    image_size: tuple
    floor: FloorModel
    fps: float
    family: str
    side: SideCamera = None
    pixels2d_side: np.ndarray = None  # (T, M, 2) exact side-view projections

    @property
    def n_frames(self) -> int:
        return self.q.shape[0]

    def frame_period(self) -> float:
        return 1.0 / self.fps


def _angle_index(model: SkeletonModel):
    return {j.name: 7 + k for k, j in enumerate(model.joints)}


def _rest_root_height(model: SkeletonModel) -> float:
    q = np.zeros(model.n_q)
    q[3] = 1.0
    sites = contact_site_positions(model, q)
    return -float(np.min(sites[:, 1]))


def _settle_root_height(model: SkeletonModel, q: np.ndarray, clearance: float = 0.0005, anchor=None) -> None:
    """Shift the root vertically so the lowest (anchor) site touches the floor."""
    sites = np.asarray(contact_site_positions(model, q))
    if anchor is not None:
        sites = sites[list(anchor)]
    q[1] -= float(np.min(sites[:, 1])) - clearance


def _pose_frames(model: SkeletonModel, cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    idx = _angle_index(model)
    t_axis = np.arange(cfg.n_frames)
    phase = 2.0 * math.pi * t_axis / cfg.period_frames
    rest_h = _rest_root_height(model)
    base = np.zeros(model.n_q)
    base[3] = 1.0
    base[0] = cfg.lateral_offset
    base[1] = rest_h
    base[2] = cfg.subject_distance
    frames = np.tile(base, (cfg.n_frames, 1))
    amp = cfg.amplitude

    if cfg.family == "standing":
        frames[:, idx["spine2_x"]] = 0.06 * amp * np.sin(phase)
        frames[:, idx["spine1_z"]] = 0.05 * amp * np.sin(0.7 * phase)
        frames[:, idx["l_shoulder_z"]] = 0.25 * amp * np.sin(phase)
        frames[:, idx["r_shoulder_z"]] = -0.25 * amp * np.sin(phase)
        frames[:, 0] += 0.015 * amp * np.sin(phase)
        for f in frames:
            _settle_root_height(model, f)
    elif cfg.family == "squat":
        s = 0.5 * (1.0 - np.cos(phase))  # 0 at stand, 1 at deepest
        for f, si in zip(frames, s):
            depth = 0.9 * amp * si
            for side in ("l", "r"):
                f[idx[f"{side}_knee_x"]] = depth
                f[idx[f"{side}_hip_x"]] = -0.55 * depth
                f[idx[f"{side}_ankle_x"]] = -0.32 * depth
            f[idx["spine1_x"]] = -0.12 * depth
            f[idx["l_shoulder_z"]] = 0.3 * si * amp
            f[idx["r_shoulder_z"]] = -0.3 * si * amp
            _settle_root_height(model, f)
    elif cfg.family == "gait":
        # Walk along +z (depth). The hip swing amplitude is matched to the
        # root speed so stance feet barely move, keeping them under the
        # contact height/speed thresholds outside the knee-lift windows.
        speed = 0.15 * amp  # m/s toward the camera axis
        leg = 0.82
        omega_cyc = 2.0 * math.pi * cfg.fps / cfg.period_frames
        swing = speed / (omega_cyc * leg)
        lift = 0.5 * amp
        for k, f in enumerate(frames):
            ph = phase[k]
            u = (phase[k] / (2.0 * math.pi)) % 1.0
            f[2] = cfg.subject_distance + speed * k / cfg.fps
            f[idx["l_hip_x"]] = swing * math.sin(ph)
            f[idx["r_hip_x"]] = -swing * math.sin(ph)
            # each knee lifts in a staggered window, so at least one foot is
            # planted at every frame (stance fraction ~0.75 per leg); the
            # ankle counter-rotates to keep the swinging foot level
            lk = lift * _swing_window(u, 0.05, 0.30)
            rk = lift * _swing_window(u, 0.55, 0.80)
            f[idx["l_knee_x"]] = lk
            f[idx["l_ankle_x"]] = -0.9 * lk
            f[idx["r_knee_x"]] = rk
            f[idx["r_ankle_x"]] = -0.9 * rk
            f[idx["l_shoulder_z"]] = 0.15 * amp * math.sin(ph + math.pi)
            f[idx["r_shoulder_z"]] = -0.15 * amp * math.sin(ph + math.pi)
            # settle on the planted leg so the lift never hoists the body
            if lk > 0.01:
                _settle_root_height(model, f, anchor=(2, 3))
            elif rk > 0.01:
                _settle_root_height(model, f, anchor=(0, 1))
            else:
                _settle_root_height(model, f)
    elif cfg.family == "hop":
        g = 9.81
        flight_frac = 0.3
        t_flight = flight_frac * cfg.period_frames / cfg.fps
        v0 = 0.5 * g * t_flight
        for k, f in enumerate(frames):
            u = (k % cfg.period_frames) / cfg.period_frames
            if u < 0.25:  # crouch
                depth = amp * 0.6 * (u / 0.25)
            elif u < 0.35:  # extend
                depth = amp * 0.6 * (1.0 - (u - 0.25) / 0.10)
            elif u < 0.35 + flight_frac:  # flight
                depth = amp * 0.15
            else:  # land and recover
                depth = amp * 0.6 * (1.0 - (u - 0.35 - flight_frac) / (0.65 - flight_frac)) * 0.5
            for side in ("l", "r"):
                f[idx[f"{side}_knee_x"]] = depth
                f[idx[f"{side}_hip_x"]] = -0.5 * depth
                f[idx[f"{side}_ankle_x"]] = -0.3 * depth
            _settle_root_height(model, f)
            if 0.35 <= u < 0.35 + flight_frac:
                tf = (u - 0.35) * cfg.period_frames / cfg.fps
                f[1] += v0 * tf - 0.5 * g * tf * tf
    else:
        raise ValueError(f"unknown family {cfg.family!r}; pick one of {FAMILIES}")
    return frames


def _swing_window(u: float, start: float, end: float) -> float:
    """Smooth 0->1->0 bump while u (cycle fraction) crosses [start, end]."""
    if not start <= u < end:
        return 0.0
    s = (u - start) / (end - start)
    return math.sin(math.pi * s) ** 2


def _contacts_from_kinematics(model: SkeletonModel, frames: np.ndarray) -> np.ndarray:
    n = frames.shape[0]
    sites = np.stack([np.asarray(contact_site_positions(model, f)) for f in frames])
    heights = sites[:, :, 1]
    speed = np.zeros((n, 4))
    if n > 1:
        speed[1:] = np.linalg.norm(sites[1:] - sites[:-1], axis=2)
        speed[0] = speed[1]
    return ((heights < CONTACT_HEIGHT_M) & (speed < CONTACT_SPEED_M_PER_FRAME)).astype(np.float64)


def generate(model: SkeletonModel, cfg: GeneratorConfig) -> TrainingSample:
    """Produce one kinematically consistent sequence of the given family."""
    rng = np.random.default_rng(cfg.seed)
    frames = _pose_frames(model, cfg, rng)
    contacts = _contacts_from_kinematics(model, frames)
    joints = np.stack([np.asarray(forward_kinematics(model, f)) for f in frames])
    pixels = np.stack([np.asarray(project(j, cfg.intrinsics)) for j in joints])
    observed = pixels.copy()
    if cfg.noise_px > 0.0:
        observed = observed + rng.normal(0.0, cfg.noise_px, size=observed.shape)
    side = None
    pixels_side = None
    if cfg.side_camera:
        side = make_side_camera(cfg)
        rmat = side.extrinsic.matrix()
        tvec = side.extrinsic.translation
        joints_side = joints @ rmat.T + tvec
        pixels_side = np.stack([np.asarray(project(j, side.intrinsics)) for j in joints_side])
    return TrainingSample(
        q=frames,
        joints3d=joints,
        pixels2d=pixels,
        pixels2d_observed=observed,
        contacts=contacts,
        intrinsics=cfg.intrinsics,
        image_size=cfg.image_size,
        floor=FloorModel.identity(),
        fps=cfg.fps,
        family=cfg.family,
        side=side,
        pixels2d_side=pixels_side,
    )


def make_side_camera(cfg: GeneratorConfig) -> SideCamera:
    """Calibrated side view, 90 degrees around the subject."""
    center = np.array([cfg.lateral_offset, 0.9, cfg.subject_distance])
    cam_pos = center + np.array([4.0, 0.0, 0.0])
    # Side camera axes in main-camera coordinates: looks along -x, keeps y up,
    # with z_side pointing from the camera toward the subject.
    rmat = np.array(
        [
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [-1.0, 0.0, 0.0],
        ]
    )
    rot = _quat_from_matrix(rmat)
    trans = -(rmat @ cam_pos)
    return SideCamera(
        intrinsics=CameraIntrinsics(900.0, 900.0, 500.0, 500.0),
        extrinsic=RigidTransform(rot, trans),
    )


def _quat_from_matrix(r: np.ndarray) -> UnitQuaternion:
    tr = np.trace(r)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        w = (r[2, 1] - r[1, 2]) / s
        x = 0.25 * s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        y = 0.25 * s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z])
    q = q / np.linalg.norm(q)
    return UnitQuaternion(float(q[0]), float(q[1]), float(q[2]), float(q[3]))
