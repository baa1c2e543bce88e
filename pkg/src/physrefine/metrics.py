"""Evaluation metrics: joint accuracy, smoothness, penetration, reprojection.

Positional metrics are root-relative (the root keypoint is subtracted from
prediction and ground truth alike), reported in millimetres. The smoothness
error compares inter-frame joint displacement magnitudes against the ground
truth's, so a constant offset scores zero and frame-to-frame jitter scores
high.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, project

MM = 1000.0
PCK_THRESHOLD_MM = 150.0
AUC_STEPS = 30


class LengthMismatch(ValueError):
    """Prediction and ground truth cover different frame counts."""


def _check_aligned(pred, gt):
    if pred.shape != gt.shape:
        raise LengthMismatch(f"shape {pred.shape} vs {gt.shape}")
    if pred.shape[0] < 1:
        raise LengthMismatch("empty sequence")


def _root_relative(joints: np.ndarray, root_index: int = 0) -> np.ndarray:
    return joints - joints[:, root_index : root_index + 1, :]


def mpjpe_mm(pred: np.ndarray, gt: np.ndarray, root_index: int = 0) -> float:
    """Mean per-joint position error after root alignment, millimetres."""
    _check_aligned(pred, gt)
    d = _root_relative(pred, root_index) - _root_relative(gt, root_index)
    return float(np.linalg.norm(d, axis=2).mean() * MM)


def procrustes_align(pred_frame: np.ndarray, gt_frame: np.ndarray) -> np.ndarray:
    """Similarity-align one frame of joints to the ground truth (s, R, t)."""
    mu_p = pred_frame.mean(axis=0)
    mu_g = gt_frame.mean(axis=0)
    p = pred_frame - mu_p
    g = gt_frame - mu_g
    cov = g.T @ p
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    flip = np.diag([1.0, 1.0, d])
    rot = u @ flip @ vt
    denom = (p * p).sum()
    scale = (s[:2].sum() + d * s[2]) / denom if denom > 0 else 1.0
    return scale * p @ rot.T + mu_g


def pa_mpjpe_mm(pred: np.ndarray, gt: np.ndarray) -> float:
    """MPJPE after per-frame Procrustes (similarity) alignment."""
    _check_aligned(pred, gt)
    total = 0.0
    for t in range(pred.shape[0]):
        aligned = procrustes_align(pred[t], gt[t])
        total += np.linalg.norm(aligned - gt[t], axis=1).mean()
    return float(total / pred.shape[0] * MM)


def _joint_errors_mm(pred, gt, root_index=0) -> np.ndarray:
    d = _root_relative(pred, root_index) - _root_relative(gt, root_index)
    return np.linalg.norm(d, axis=2) * MM


def pck_percent(pred, gt, threshold_mm: float = PCK_THRESHOLD_MM) -> float:
    _check_aligned(pred, gt)
    err = _joint_errors_mm(pred, gt)
    return float((err < threshold_mm).mean() * 100.0)


def auc_percent(pred, gt, max_mm: float = PCK_THRESHOLD_MM, steps: int = AUC_STEPS) -> float:
    """Mean PCK over thresholds spread across (0, max_mm]."""
    _check_aligned(pred, gt)
    err = _joint_errors_mm(pred, gt)
    thresholds = np.linspace(max_mm / steps, max_mm, steps)
    return float(np.mean([(err < th).mean() for th in thresholds]) * 100.0)


def compute_e_smooth(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean |displacement difference| between consecutive frames, mm.

    Averages |  ||p_t - p_(t-1)||  -  ||g_t - g_(t-1)||  | over the valid
    inter-frame pairs and joints.
    """
    _check_aligned(pred, gt)
    if pred.shape[0] < 2:
        raise LengthMismatch("smoothness needs at least two frames")
    jit_pred = np.linalg.norm(pred[1:] - pred[:-1], axis=2)
    jit_gt = np.linalg.norm(gt[1:] - gt[:-1], axis=2)
    return float(np.abs(jit_gt - jit_pred).mean() * MM)


def compute_penetration(site_heights: np.ndarray, contact_gt: np.ndarray):
    """(MPE mm, PNP %) from per-frame site heights above the floor.

    MPE averages penetration depth over the (site, frame) pairs labelled in
    contact; PNP is the fraction of frames where no site is below the floor.
    """
    heights = np.asarray(site_heights, dtype=np.float64)
    contact = np.asarray(contact_gt, dtype=np.float64) > 0.5
    depth = np.maximum(0.0, -heights)
    if contact.any():
        mpe = float(depth[contact].mean() * MM)
    else:
        mpe = 0.0
    pnp = float((~(heights < 0.0).any(axis=1)).mean() * 100.0)
    return mpe, pnp


def reprojection_error_px(joints3d: np.ndarray, pixels_gt: np.ndarray, intrinsics: CameraIntrinsics):
    """(mean, std) pixel distance after projecting the predicted joints.

    Depths are clamped to a small positive floor so badly wrong predictions
    still score (very large) finite errors instead of failing to project.
    """
    tt = joints3d.shape[0]
    errs = []
    for t in range(tt):
        pts = joints3d[t].copy()
        pts[:, 2] = np.maximum(pts[:, 2], 0.05)
        proj = np.asarray(project(pts, intrinsics))
        errs.append(np.linalg.norm(proj - pixels_gt[t], axis=1))
    errs = np.concatenate(errs)
    return float(errs.mean()), float(errs.std())


@dataclass
class MetricsReport:
    """Everything the evaluation verb reports, JSON-serialisable."""

    mpjpe_mm: float
    pa_mpjpe_mm: float
    pck_percent: float
    auc_percent: float
    e_smooth_mm: float
    mpe_mm: float = 0.0
    pnp_percent: float = 100.0
    e2d_input_px: float = 0.0
    e2d_input_std: float = 0.0
    e2d_side_px: float = None
    e2d_side_std: float = None
    per_frame_mpjpe_mm: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("pck_percent", "auc_percent", "pnp_percent"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must lie in [0, 100], got {v}")
        if self.mpe_mm < 0.0:
            raise ValueError(f"mpe_mm must be non-negative, got {self.mpe_mm}")

    def to_dict(self) -> dict:
        out = {
            "mpjpe_mm": self.mpjpe_mm,
            "pa_mpjpe_mm": self.pa_mpjpe_mm,
            "pck_percent": self.pck_percent,
            "auc_percent": self.auc_percent,
            "e_smooth_mm": self.e_smooth_mm,
            "mpe_mm": self.mpe_mm,
            "pnp_percent": self.pnp_percent,
            "e2d_input_px": self.e2d_input_px,
            "e2d_input_std": self.e2d_input_std,
            "per_frame_mpjpe_mm": list(self.per_frame_mpjpe_mm),
        }
        if self.e2d_side_px is not None:
            out["e2d_side_px"] = self.e2d_side_px
            out["e2d_side_std"] = self.e2d_side_std
        return out


def compute_pose_metrics(
    pred_joints: np.ndarray,
    gt_joints: np.ndarray,
    intrinsics: CameraIntrinsics = None,
    gt_pixels: np.ndarray = None,
    side_camera=None,
    gt_pixels_side: np.ndarray = None,
    site_heights: np.ndarray = None,
    contact_gt: np.ndarray = None,
) -> MetricsReport:
    """Aggregate every metric available from the supplied ground truth."""
    _check_aligned(pred_joints, gt_joints)
    per_frame = [
        float(np.linalg.norm(_root_relative(pred_joints[t : t + 1]) - _root_relative(gt_joints[t : t + 1]), axis=2).mean() * MM)
        for t in range(pred_joints.shape[0])
    ]
    e2d_mean = e2d_std = 0.0
    if intrinsics is not None and gt_pixels is not None:
        e2d_mean, e2d_std = reprojection_error_px(pred_joints, gt_pixels, intrinsics)
    side_mean = side_std = None
    if side_camera is not None and gt_pixels_side is not None:
        rmat = side_camera.extrinsic.matrix()
        tvec = side_camera.extrinsic.translation
        side_joints = pred_joints @ rmat.T + tvec
        side_mean, side_std = reprojection_error_px(side_joints, gt_pixels_side, side_camera.intrinsics)
    mpe, pnp = 0.0, 100.0
    if site_heights is not None:
        mpe, pnp = compute_penetration(site_heights, contact_gt if contact_gt is not None else np.zeros_like(site_heights))
    return MetricsReport(
        mpjpe_mm=mpjpe_mm(pred_joints, gt_joints),
        pa_mpjpe_mm=pa_mpjpe_mm(pred_joints, gt_joints),
        pck_percent=pck_percent(pred_joints, gt_joints),
        auc_percent=auc_percent(pred_joints, gt_joints),
        e_smooth_mm=compute_e_smooth(pred_joints, gt_joints) if pred_joints.shape[0] > 1 else 0.0,
        mpe_mm=mpe,
        pnp_percent=pnp,
        e2d_input_px=e2d_mean,
        e2d_input_std=e2d_std,
        e2d_side_px=side_mean,
        e2d_side_std=side_std,
        per_frame_mpjpe_mm=per_frame,
    )
