"""Supervised losses, optimiser, and the staged training pipeline.

Stages follow the same order the inference pipeline composes the pieces:
the pose regressor first (3D + reprojection + orientation + limit + contact
losses), then the translation regressor on its outputs, then the gain net
through the unrolled refinement loop, then the contact-force net, and
finally a joint phase over everything with early stopping. A 2D-only
finetuning mode drives just the reprojection loss for footage without 3D
labels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backend as bk
from .autodiff import Tensor
from .backend import value_of
from .camera import CameraIntrinsics, Keypoints2D, canonicalize, project, root_relative
from .cycle import ContactLabels, CycleState, DynamicCycle, pose_error
from .skeleton import SkeletonModel, forward_kinematics, joint_limit_penalty
from .spatial import quat_to_matrix
from .synthetic import TrainingSample

BCE_CLAMP = 1e-6
TORQUE_REG_WEIGHT = 1e-6  # weight of the squared-torque term in the gain-net loss


class NonFiniteLoss(ArithmeticError):
    """A training loss left the reals; aborts with context."""


@dataclass
class Schedule:
    """Learning rates and loop sizes; the shipped rates assume long runs."""

    phase: str = "pretrain"
    lr_pretrain: float = 3.0e-6
    lr_joint: float = 3.0e-7
    patience: int = 20
    batch_size: int = 32
    epochs_pose: int = 30
    epochs_trans: int = 30
    epochs_gain: int = 15
    epochs_force: int = 30
    epochs_joint: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr_pretrain <= 0 or self.lr_joint <= 0:
            raise ValueError("learning rates must be positive")


class Adam:
    """Standard Adam with bias correction; state keyed per parameter."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * (g * g)
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- window assembly ------------------------------------------------------------


def window_stack(per_frame: np.ndarray, t: int, window: int) -> np.ndarray:
    """(C,) per-frame features -> (C, W) window ending at t, replication-padded."""
    idx = np.clip(np.arange(t - window + 1, t + 1), 0, None)
    return per_frame[idx].T.copy()


def krr_frames(sample: TrainingSample) -> np.ndarray:
    """(T, 2M) root-relative normalised keypoints from the observed pixels."""
    w, h = sample.image_size
    out = np.empty((sample.n_frames, sample.pixels2d.shape[1] * 2))
    for t in range(sample.n_frames):
        rr = root_relative(Keypoints2D(sample.pixels2d_observed[t]), w, h)
        out[t] = rr.values.reshape(-1)
    return out


def kc_frames(sample: TrainingSample) -> np.ndarray:
    """(T, 2M) canonical keypoints from the observed pixels."""
    out = np.empty((sample.n_frames, sample.pixels2d.shape[1] * 2))
    for t in range(sample.n_frames):
        kc = canonicalize(Keypoints2D(sample.pixels2d_observed[t]), sample.intrinsics)
        out[t] = kc.values.reshape(-1)
    return out


# -- losses -----------------------------------------------------------------------


def _clamp01(p):
    upper = 1.0 - BCE_CLAMP
    return -bk.maximum(-bk.maximum(p, BCE_CLAMP), -upper)


def loss_contact_bce(probs, target) -> object:
    p = _clamp01(probs)
    t = value_of(target)
    return -bk.tsum(t * bk.log(p) + (1.0 - t) * bk.log(1.0 - p))


def loss_orientation(ori_hat, ori_true) -> object:
    d = quat_to_matrix(ori_hat) - quat_to_matrix(value_of(ori_true))
    return bk.tsum(d * d)


def loss_3d(model: SkeletonModel, q_full, joints_true) -> object:
    fk = forward_kinematics(model, q_full)
    d = fk - value_of(joints_true)
    return bk.tsum(d * d)


def _clamped_projection(fk, intrinsics: CameraIntrinsics, min_depth: float = 0.05):
    """Perspective projection with the depth clamped away from the camera
    plane, so an untrained translation head cannot push joints behind the
    camera and break the loss; the gradient drives the depth positive."""
    x, y = fk[:, 0], fk[:, 1]
    z = bk.maximum(fk[:, 2], min_depth)
    u = intrinsics.fx * (x / z) + intrinsics.cx
    v = intrinsics.fy * (y / z) + intrinsics.cy
    return bk.stack([u, v], axis=1)


def loss_2d(model: SkeletonModel, q_full, pixels_true, intrinsics: CameraIntrinsics, image_size) -> object:
    fk = forward_kinematics(model, q_full)
    proj = _clamped_projection(fk, intrinsics)
    scale = np.array([1.0 / image_size[0], 1.0 / image_size[1]])
    d = (proj - value_of(pixels_true)) * scale
    return bk.tsum(d * d)


def loss_pose_frame(model, ori_hat, angles_hat, probs, sample: TrainingSample, t: int) -> object:
    """Pose-regressor loss for one frame: 3D + 2D + orientation + limits + contacts.

    The global translation is taken from ground truth here; the translation
    regressor trains separately on its own loss.
    """
    q_true = sample.q[t]
    q_full = bk.concat([q_true[0:3], ori_hat, angles_hat])
    total = loss_3d(model, q_full, sample.joints3d[t])
    total = total + loss_2d(model, q_full, sample.pixels2d[t], sample.intrinsics, sample.image_size)
    total = total + loss_orientation(ori_hat, q_true[3:7])
    total = total + joint_limit_penalty(model, angles_hat)
    total = total + loss_contact_bce(probs, sample.contacts[t])
    return total


def loss_trans(trans_hat, trans_true) -> object:
    d = trans_hat - value_of(trans_true)
    return d @ d


def loss_dyn(q_final, q_hat_target, taus, phi: float = TORQUE_REG_WEIGHT) -> object:
    """Tracking loss after the unrolled loop plus the squared-torque brake."""
    d = pose_error(q_final, value_of(q_hat_target))
    total = d @ d
    for tau in taus:
        total = total + phi * (tau @ tau)
    return total


def _check_finite(loss_value: float, where: str):
    if not math.isfinite(loss_value):
        raise NonFiniteLoss(f"{where}: loss became {loss_value}")


# -- per-frame network application ------------------------------------------------


def run_posenet_frame(pose_net, krr: np.ndarray, t: int, window: int):
    win = window_stack(krr, t, window)[None]
    ori, angles, probs = pose_net(win)
    return ori[0], angles[0], probs[0]


def posenet_outputs(pose_net, krr: np.ndarray, window: int):
    """Frame-by-frame pose-net outputs for a whole sequence (detached)."""
    tt = krr.shape[0]
    n_angles = pose_net.angle_net.head.weight.data.shape[0]
    oris = np.zeros((tt, 4))
    angles = np.zeros((tt, n_angles))
    probs = np.zeros((tt, 4))
    with ad.no_grad():
        for t in range(tt):
            o, a, p = run_posenet_frame(pose_net, krr, t, window)
            oris[t] = value_of(o)
            angles[t] = value_of(a)
            probs[t] = value_of(p)
    return oris, angles, probs


def root_relative_joints(model: SkeletonModel, ori, angles) -> np.ndarray:
    """Keypoint positions with the root pinned at the origin."""
    q = bk.concat([np.zeros(3), ori, angles])
    return forward_kinematics(model, q)


def transnet_input_frames(model, oris, angles, kc: np.ndarray) -> np.ndarray:
    """(T, 5M) channels: root-relative 3D joints then canonical keypoints."""
    tt = kc.shape[0]
    m_k = kc.shape[1] // 2
    out = np.zeros((tt, 5 * m_k))
    for t in range(tt):
        prr = np.asarray(value_of(root_relative_joints(model, oris[t], angles[t])))
        out[t] = np.concatenate([prr.reshape(-1), kc[t]])
    return out


# -- training stages ----------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, stage: str, epoch: int, **losses):
        row = {"stage": stage, "epoch": epoch}
        row.update({k: float(v) for k, v in losses.items()})
        self.rows.append(row)

    def write_csv(self, path):
        if not self.rows:
            return
        keys = ["stage", "epoch"] + sorted({k for r in self.rows for k in r} - {"stage", "epoch"})
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            for r in self.rows:
                writer.writerow(r)

    def last(self, stage: str, key: str) -> float:
        for row in reversed(self.rows):
            if row["stage"] == stage and key in row:
                return row[key]
        raise KeyError(f"no {key} logged for stage {stage}")


def _batched(indices, batch_size, rng):
    order = np.array(indices)
    rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def recalibrate_batchnorm(net, windows: np.ndarray):
    """Replace running statistics with exact full-data statistics.

    Weight updates outrun the momentum-tracked running estimates, which
    costs eval-mode accuracy on low-variance channels; one full-batch pass
    with momentum one removes the gap.
    """
    from .networks import BatchNorm1d, Module

    def visit(module):
        yield module
        for _, child in module._children():
            yield from visit(child)

    bns = [m for m in visit(net) if isinstance(m, BatchNorm1d)]
    saved = [(bn.momentum, bn.training) for bn in bns]
    for bn in bns:
        bn.momentum = 1.0
        bn.training = True
    with ad.no_grad():
        net(windows)
    for bn, (momentum, training) in zip(bns, saved):
        bn.momentum = momentum
        bn.training = training


def pretrain_pose(pose_net, model, samples, schedule: Schedule, log: TrainLog, epochs=None, lr=None, window=10):
    """Stage one: the pose regressor on window-level supervision."""
    pose_net.set_training(True)
    opt = Adam(pose_net.parameters(), lr or schedule.lr_pretrain)
    rng = np.random.default_rng(schedule.seed)
    krr_all = [krr_frames(s) for s in samples]
    index = [(i, t) for i, s in enumerate(samples) for t in range(s.n_frames)]
    for epoch in range(epochs if epochs is not None else schedule.epochs_pose):
        total = 0.0
        count = 0
        for batch in _batched(index, schedule.batch_size, rng):
            opt.zero_grad()
            wins = np.stack([window_stack(krr_all[i], t, window) for i, t in batch])
            ori_b, ang_b, prob_b = pose_net(wins)
            loss = None
            for row, (i, t) in enumerate(batch):
                term = loss_pose_frame(model, ori_b[row], ang_b[row], prob_b[row], samples[i], t)
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / len(batch))
            _check_finite(float(value_of(loss)), "pose-net pretraining")
            ad.backward(loss)
            opt.step()
            total += float(value_of(loss)) * len(batch)
            count += len(batch)
        log.add("pose", epoch, loss_pose=total / count)
    all_windows = np.stack([window_stack(krr_all[i], t, window) for i, t in index])
    recalibrate_batchnorm(pose_net, all_windows)
    pose_net.set_training(False)
    return log


def pretrain_trans(trans_net, pose_net, model, samples, schedule: Schedule, log: TrainLog, epochs=None, lr=None, window=10):
    """Stage two: the translation regressor on frozen pose-net outputs."""
    trans_net.set_training(True)
    opt = Adam(trans_net.parameters(), lr or schedule.lr_pretrain)
    rng = np.random.default_rng(schedule.seed + 1)
    feats_all = []
    for s in samples:
        krr = krr_frames(s)
        kc = kc_frames(s)
        oris, angles, _ = posenet_outputs(pose_net, krr, window)
        feats_all.append(transnet_input_frames(model, oris, angles, kc))
    index = [(i, t) for i, s in enumerate(samples) for t in range(s.n_frames)]
    for epoch in range(epochs if epochs is not None else schedule.epochs_trans):
        total = 0.0
        count = 0
        for batch in _batched(index, schedule.batch_size, rng):
            opt.zero_grad()
            wins = np.stack([window_stack(feats_all[i], t, window) for i, t in batch])
            trans_b = trans_net(wins)
            loss = None
            for row, (i, t) in enumerate(batch):
                term = loss_trans(trans_b[row], samples[i].q[t][0:3])
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / len(batch))
            _check_finite(float(value_of(loss)), "translation-net pretraining")
            ad.backward(loss)
            opt.step()
            total += float(value_of(loss)) * len(batch)
            count += len(batch)
        log.add("trans", epoch, loss_trans=total / count)
    all_windows = np.stack([window_stack(feats_all[i], t, window) for i, t in index])
    recalibrate_batchnorm(trans_net, all_windows)
    trans_net.set_training(False)
    return log


def target_sequence(pose_net, trans_net, model, sample: TrainingSample, window=10):
    """Detached per-frame kinematic targets (q_hat, contact labels)."""
    krr = krr_frames(sample)
    kc = kc_frames(sample)
    oris, angles, probs = posenet_outputs(pose_net, krr, window)
    feats = transnet_input_frames(model, oris, angles, kc)
    tt = sample.n_frames
    q_hat = np.zeros((tt, model.n_q))
    with ad.no_grad():
        for t in range(tt):
            win = window_stack(feats, t, window)[None]
            trans = value_of(trans_net(win))[0]
            q_hat[t] = np.concatenate([trans, oris[t], angles[t]])
    return q_hat, probs


def rollout_loss_dyn(cycle: DynamicCycle, q_hat_seq, probs_seq, frame_period, phi=TORQUE_REG_WEIGHT, threshold=0.5):
    """Unrolled tracking loss over a clip; taped through every inner step."""
    state = CycleState(q=Tensor(q_hat_seq[0].copy()), qd=Tensor(np.zeros(cycle.model.n_v)))
    total = None
    for t in range(1, q_hat_seq.shape[0]):
        labels = ContactLabels(probs_seq[t], threshold)
        state, trace = cycle.refine_frame(state, q_hat_seq[t], labels, frame_period)
        taus = [rec.tau for rec in trace.records]
        term = loss_dyn(state.q, q_hat_seq[t], taus, phi)
        total = term if total is None else total + term
    return total * (1.0 / max(1, q_hat_seq.shape[0] - 1))


def pretrain_gain(cycle: DynamicCycle, clips, schedule: Schedule, log: TrainLog, epochs=None, lr=None, frame_period=1 / 30):
    """Stage three: gain net through the unrolled refinement loop.

    ``clips`` is a list of (q_hat_seq, probs_seq) target sequences.
    """
    opt = Adam(cycle.gain_net.parameters(), lr or schedule.lr_pretrain)
    for epoch in range(epochs if epochs is not None else schedule.epochs_gain):
        total = 0.0
        for q_hat_seq, probs_seq in clips:
            opt.zero_grad()
            loss = rollout_loss_dyn(cycle, q_hat_seq, probs_seq, frame_period)
            _check_finite(float(value_of(loss)), "gain-net pretraining")
            ad.backward(loss)
            opt.step()
            total += float(value_of(loss))
        log.add("dyn", epoch, loss_dyn=total / len(clips))
    return log


def collect_grf_episodes(cycle: DynamicCycle, q_hat_seq, probs_seq, frame_period, threshold=0.5):
    """Roll a clip once (detached) and keep everything the force loss needs.

    The contact force cancels out of the accelerations, so the trajectory,
    torques and Jacobians do not change while the force net trains: one
    rollout serves every epoch.
    """
    episodes = []
    with ad.no_grad():
        state = CycleState(q=q_hat_seq[0].copy(), qd=np.zeros(cycle.model.n_v))
        dt = frame_period / cycle.config.substeps
        for t in range(1, q_hat_seq.shape[0]):
            labels = ContactLabels(probs_seq[t], threshold)
            for _ in range(cycle.config.substeps):
                state, rec = cycle.cycle_step(state, q_hat_seq[t], labels, dt)
                if rec.active_sites and rec.grf_features is not None:
                    episodes.append(
                        {
                            "features": rec.grf_features,
                            "active": rec.active_sites,
                            "tau_root": value_of(rec.tau)[0:6].copy(),
                            "j1_t": rec.j1_t,
                            "g": rec.g_active,
                        }
                    )
    return episodes


def pretrain_force(cycle: DynamicCycle, episode_sets, schedule: Schedule, log: TrainLog, epochs=None, lr=None):
    """Stage four: the contact-force net on recorded contact episodes."""
    from .contact import loss_cone, loss_force, loss_smooth

    opt = Adam(cycle.force_net.parameters(), lr or schedule.lr_pretrain)
    rot_to_cam = cycle.floor.rotation().T
    for epoch in range(epochs if epochs is not None else schedule.epochs_force):
        total = 0.0
        count = 0
        for episodes in episode_sets:
            opt.zero_grad()
            loss = None
            lam_prev = None
            prev_sites = ()
            for ep in episodes:
                lam_floor = cycle.force_net(ep["features"], ep["active"])
                lam_cam = _block_rotate(lam_floor, rot_to_cam, len(ep["active"]))
                term = loss_force(ep["tau_root"], ep["j1_t"], ep["g"], lam_cam)
                term = term + loss_cone(lam_floor, cycle.cone)
                persisting = [i for i, s in enumerate(ep["active"]) if s in prev_sites]
                if persisting and lam_prev is not None:
                    prev = np.concatenate(
                        [value_of(lam_prev).reshape(-1, 3)[list(prev_sites).index(ep["active"][i])] for i in persisting]
                    )
                    parts = [lam_floor[3 * i : 3 * i + 3] for i in persisting]
                    cur = bk.concat(parts) if len(parts) > 1 else parts[0]
                    term = term + loss_smooth(cur, prev)
                loss = term if loss is None else loss + term
                lam_prev = lam_floor
                prev_sites = ep["active"]
            if loss is None:
                continue
            loss = loss * (1.0 / max(1, len(episodes)))
            _check_finite(float(value_of(loss)), "force-net pretraining")
            ad.backward(loss)
            opt.step()
            total += float(value_of(loss))
            count += 1
        log.add("grf", epoch, loss_grf=total / max(1, count))
    return log


def _block_rotate(lam, rot, n_c):
    block = np.zeros((3 * n_c, 3 * n_c))
    for i in range(n_c):
        block[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = rot
    return block @ lam


def pretrain(nets, model, samples, schedule: Schedule, cycle: DynamicCycle, frame_period=1 / 30, window=10, log_path=None):
    """All four stages in order; returns the training log."""
    log = TrainLog()
    pretrain_pose(nets["pose"], model, samples, schedule, log, window=window)
    pretrain_trans(nets["trans"], nets["pose"], model, samples, schedule, log, window=window)
    clips = [target_sequence(nets["pose"], nets["trans"], model, s, window) for s in samples]
    pretrain_gain(cycle, clips, schedule, log, frame_period=frame_period)
    episode_sets = [collect_grf_episodes(cycle, q, p, frame_period) for q, p in clips]
    pretrain_force(cycle, episode_sets, schedule, log)
    if log_path:
        log.write_csv(log_path)
    return log


def joint_train(nets, model, samples, schedule: Schedule, cycle: DynamicCycle, frame_period=1 / 30, window=10, val_samples=None, log_path=None):
    """Simultaneous optimisation of every objective at the joint rate.

    Early-stops on the validation total loss with the schedule's patience.
    """
    log = TrainLog()
    params = []
    for net in nets.values():
        params.extend(net.parameters())
    opt = Adam(params, schedule.lr_joint)
    val_samples = val_samples or samples
    best = math.inf
    stale = 0
    for epoch in range(schedule.epochs_joint):
        train_loss = 0.0
        for sample in samples:
            opt.zero_grad()
            loss = _joint_clip_loss(nets, model, sample, cycle, frame_period, window)
            _check_finite(float(value_of(loss)), "joint training")
            ad.backward(loss)
            opt.step()
            train_loss += float(value_of(loss))
        val = sum(
            float(value_of(_joint_clip_loss(nets, model, s, cycle, frame_period, window, taped=False)))
            for s in val_samples
        ) / len(val_samples)
        log.add("joint", epoch, loss_total=train_loss / len(samples), loss_val=val)
        if val < best - 1e-12:
            best = val
            stale = 0
        else:
            stale += 1
            if stale > schedule.patience:
                break
    if log_path:
        log.write_csv(log_path)
    return log


def _joint_clip_loss(nets, model, sample: TrainingSample, cycle: DynamicCycle, frame_period, window, taped=True):
    """End-to-end loss of one clip: every objective, fully connected.

    Per-frame translation-net inputs are cached as taped columns, so the
    window at frame t carries gradient paths into the pose net at every
    frame it covers.
    """
    ctx = _NullCtx() if taped else ad.no_grad()
    with ctx:
        krr = krr_frames(sample)
        kc = kc_frames(sample)
        tt = sample.n_frames
        feat_cols = []  # taped (C, 1) columns per frame
        state = None
        total = None
        for t in range(tt):
            ori, angles, probs = run_posenet_frame(nets["pose"], krr, t, window)
            cp_term = loss_pose_frame(model, ori, angles, probs, sample, t)
            prr = root_relative_joints(model, ori, angles)
            feat_t = bk.concat([bk.reshape(prr, (-1,)), kc[t]])
            feat_cols.append(bk.reshape(feat_t, (-1, 1)))
            win = _window_from_columns(feat_cols, t, window)
            trans = nets["trans"](win)[0]
            ct_term = loss_trans(trans, sample.q[t][0:3])
            q_hat = bk.concat([trans, ori, angles])
            labels = ContactLabels(value_of(probs), cycle.config.contact_threshold)
            if state is None:
                state = CycleState(q=q_hat, qd=_zeros_like_vel(cycle, taped))
                dyn_term = 0.0
                grf_term = 0.0
            else:
                state, trace = cycle.refine_frame(state, q_hat, labels, frame_period)
                taus = [rec.tau for rec in trace.records]
                dyn_term = loss_dyn(state.q, value_of(q_hat), taus)
                grf_terms = [rec.grf_loss for rec in trace.records if rec.grf_loss is not None]
                grf_term = sum(grf_terms) if grf_terms else 0.0
            term = cp_term + ct_term + dyn_term + grf_term
            total = term if total is None else total + term
        return total * (1.0 / tt)


def _window_from_columns(feat_cols, t, window):
    """(1, C, W) window ending at t from cached per-frame columns."""
    first = max(0, t - window + 1)
    cols = feat_cols[first : t + 1]
    cols = [feat_cols[0]] * (window - len(cols)) + cols
    win = bk.concat(cols, axis=1)
    shape = value_of(win).shape
    return bk.reshape(win, (1,) + tuple(shape))


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _zeros_like_vel(cycle, taped):
    z = np.zeros(cycle.model.n_v)
    return Tensor(z) if taped else z


def finetune_2d(nets, model, samples, schedule: Schedule, window=10, epochs: int = 20, lr=None, log: TrainLog = None):
    """Reprojection-only finetuning of the keypoint-lifting networks.

    The observed keypoints act as pseudo ground truth; the loss is the 2D
    reprojection of the assembled pose (regressed translation included),
    with no 3D-supervised term anywhere. History frames of the translation
    window enter as values recomputed each epoch (truncated backpropagation
    through the window); the current frame stays fully taped.
    """
    log = log or TrainLog()
    params = nets["pose"].parameters() + nets["trans"].parameters()
    opt = Adam(params, lr or schedule.lr_pretrain)
    rng = np.random.default_rng(schedule.seed + 7)
    krr_all = [krr_frames(s) for s in samples]
    kc_all = [kc_frames(s) for s in samples]
    index = [(i, t) for i, s in enumerate(samples) for t in range(s.n_frames)]
    for epoch in range(epochs):
        feats_all = []
        for i, s in enumerate(samples):
            oris, angles, _ = posenet_outputs(nets["pose"], krr_all[i], window)
            feats_all.append(transnet_input_frames(model, oris, angles, kc_all[i]))
        total = 0.0
        count = 0
        for batch in _batched(index, schedule.batch_size, rng):
            opt.zero_grad()
            loss = None
            for i, t in batch:
                s = samples[i]
                ori, angles, _ = run_posenet_frame(nets["pose"], krr_all[i], t, window)
                prr = root_relative_joints(model, ori, angles)
                feat_t = bk.concat([bk.reshape(prr, (-1,)), kc_all[i][t]])
                win = _window_with_history(feats_all[i], feat_t, t, window)
                trans = nets["trans"](win)[0]
                q_hat = bk.concat([trans, ori, angles])
                term = loss_2d(model, q_hat, s.pixels2d_observed[t], s.intrinsics, s.image_size)
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / len(batch))
            _check_finite(float(value_of(loss)), "2D finetuning")
            ad.backward(loss)
            opt.step()
            total += float(value_of(loss)) * len(batch)
            count += len(batch)
        log.add("finetune2d", epoch, loss_2d=total / count)
    return log


def _window_with_history(feat_frames: np.ndarray, feat_t, t: int, window: int):
    """(1, C, W) window: detached history columns plus the taped frame t."""
    idx = np.clip(np.arange(t - window + 1, t), 0, None)
    hist = feat_frames[idx].T  # (C, W-1)
    win = bk.concat([hist, bk.reshape(feat_t, (-1, 1))], axis=1)
    shape = value_of(win).shape
    return bk.reshape(win, (1,) + tuple(shape))
