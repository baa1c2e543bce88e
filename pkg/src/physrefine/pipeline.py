"""End-to-end inference: keypoints in, physically refined motion out.

Strictly causal: each output frame is a function of the keypoints up to and
including its own frame, so truncating the input truncates the output
without changing the shared prefix.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backend import value_of
from .camera import Keypoints2D, canonicalize, fill_low_confidence, root_relative
from .config import RunConfig
from .cycle import ContactLabels, CycleState, DynamicCycle, default_kp_ini
from .networks import ContactForceNet, GainNet, PoseNet, TransNet, load_networks, save_networks
from .skeleton import SkeletonModel, contact_site_positions, forward_kinematics, load_skeleton
from .training import run_posenet_frame, window_stack


@dataclass
class MotionFrame:
    timestamp: float
    q: np.ndarray
    qd: np.ndarray
    tau: np.ndarray
    contacts: np.ndarray  # (4,) probabilities
    lam: np.ndarray  # (4, 3) floor frame, zeros when inactive
    root_residual: float
    q_target: np.ndarray = None  # kinematic target before refinement


@dataclass
class MotionSequence:
    frames: list = field(default_factory=list)

    def __post_init__(self):
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timestamps must strictly increase")

    def stack(self, attr: str) -> np.ndarray:
        return np.stack([getattr(f, attr) for f in self.frames])

    def joints3d(self, model: SkeletonModel) -> np.ndarray:
        return np.stack([np.asarray(forward_kinematics(model, f.q)) for f in self.frames])

    def site_heights(self, model: SkeletonModel, floor) -> np.ndarray:
        rot = floor.rotation()
        axis = floor.normal_axis
        out = np.zeros((len(self.frames), 4))
        for t, f in enumerate(self.frames):
            sites = np.asarray(contact_site_positions(model, f.q))
            for i in range(4):
                out[t, i] = float(floor.transform.apply(sites[i])[axis])
        return out


def build_networks(config: RunConfig, model: SkeletonModel, seed: int = None) -> dict:
    """Four freshly initialised networks sized from the configuration."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    conv_cfg = config.conv_config()
    m_k = len(model.keypoints)
    n_v = model.n_v
    gain_in = 2 * model.n_q + 3 * n_v  # q_hat, q0, qd0, diag M, pose error
    grf_in = 6 * len(model.contact_sites) + 6 + len(model.contact_sites)
    return {
        "pose": PoseNet(rng, m_k, model.n_dof, conv_cfg),
        "trans": TransNet(rng, m_k, conv_cfg),
        "gain": GainNet(rng, gain_in, n_v, hidden=config.fc_hidden),
        "force": ContactForceNet(rng, grf_in, hidden=config.fc_hidden),
    }


def build_cycle(config: RunConfig, model: SkeletonModel, nets: dict) -> DynamicCycle:
    kp_ini = config.kp_ini if config.kp_ini is not None else default_kp_ini(model)
    return DynamicCycle(model, nets["gain"], nets["force"], config.floor, config.cycle, kp_ini)


@dataclass
class PipelineTimings:
    refine_ms: list = field(default_factory=list)

    @property
    def mean_refine_ms(self) -> float:
        return float(np.mean(self.refine_ms)) if self.refine_ms else 0.0


def run_pipeline(timestamps, keypoint_frames, config: RunConfig, model: SkeletonModel, nets: dict, timings: PipelineTimings = None):
    """Refine a keypoint sequence into a MotionSequence, causally.

    Per frame: confidence fill, both keypoint normalisations, the pose and
    translation regressors over their 10-frame windows, then the physics
    refinement loop from the running state.
    """
    cycle = build_cycle(config, model, nets)
    w_img, h_img = config.image_size
    window = config.window
    m_k = len(model.keypoints)
    filled = fill_low_confidence(keypoint_frames, config.confidence_threshold)
    krr_rows = np.zeros((len(filled), 2 * m_k))
    feat_rows = np.zeros((len(filled), 5 * m_k))
    frames = []
    state = None
    for t, kp in enumerate(filled):
        krr_rows[t] = root_relative(kp, w_img, h_img).values.reshape(-1)
        kc = canonicalize(kp, config.intrinsics).values.reshape(-1)
        with ad.no_grad():
            ori, angles, probs = run_posenet_frame(nets["pose"], krr_rows[: t + 1], t, window)
            ori, angles, probs = value_of(ori), value_of(angles), value_of(probs)
            q_rr = np.concatenate([np.zeros(3), ori, angles])
            prr = np.asarray(value_of(forward_kinematics(model, q_rr)))
            feat_rows[t] = np.concatenate([prr.reshape(-1), kc])
            win = window_stack(feat_rows[: t + 1], t, window)[None]
            trans = value_of(nets["trans"](win))[0]
        q_hat = np.concatenate([trans, ori, angles])
        labels = ContactLabels(probs, config.cycle.contact_threshold)
        if state is None:
            state = CycleState(q=q_hat.copy(), qd=np.zeros(model.n_v))
        start = time.perf_counter()
        with ad.no_grad():
            state, trace = cycle.refine_frame(state, q_hat, labels, 1.0 / config.fps)
        if timings is not None:
            timings.refine_ms.append((time.perf_counter() - start) * 1000.0)
        frames.append(
            MotionFrame(
                timestamp=float(timestamps[t]),
                q=value_of(state.q).copy(),
                qd=value_of(state.qd).copy(),
                tau=trace.tau_final,
                contacts=probs.copy(),
                lam=trace.lam_full,
                root_residual=trace.root_residual,
                q_target=q_hat,
            )
        )
    return MotionSequence(frames)


def load_or_fresh_networks(config: RunConfig, model: SkeletonModel) -> dict:
    nets = build_networks(config, model)
    if config.checkpoint_path:
        load_networks(config.checkpoint_path, nets)
    for net in nets.values():
        net.set_training(False)
    return nets


def save_all(config: RunConfig, nets: dict, path=None):
    save_networks(path or config.checkpoint_path, nets)


def load_model(config: RunConfig) -> SkeletonModel:
    return load_skeleton(config.skeleton_path)
