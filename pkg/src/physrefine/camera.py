"""Pinhole camera model and the two 2D keypoint input representations.

Canonical keypoints divide out the intrinsics, landing every joint on the
Z = 1 plane: the same 3D pose seen through any calibrated pinhole camera
produces identical canonical coordinates, which is what lets a translation
regressor train and test across cameras. Root-relative keypoints drop the
global cue instead, normalising by image size for the pose regressor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend as bk
from .backend import value_of


class BehindCamera(ValueError):
    """A point with non-positive depth cannot be projected."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters, pixels; no skew, no distortion."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")


@dataclass(frozen=True)
class Keypoints2D:
    """Detected 2D joints, pixels, with optional per-joint confidence."""

    pixels: np.ndarray  # (M, 2)
    confidence: np.ndarray = None

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        object.__setattr__(self, "pixels", p)
        if p.ndim != 2 or p.shape[1] != 2:
            raise ValueError(f"pixels must be (M, 2), got {p.shape}")
        if self.confidence is not None:
            c = np.asarray(self.confidence, dtype=np.float64)
            if c.shape != (p.shape[0],):
                raise ValueError(f"confidence must be (M,), got {c.shape}")
            object.__setattr__(self, "confidence", c)


@dataclass(frozen=True)
class CanonicalKeypoints:
    """Keypoints on the Z = 1 plane, dimensionless."""

    values: np.ndarray  # (M, 2)


@dataclass(frozen=True)
class RootRelativeKeypoints:
    """Root-subtracted keypoints normalised by image size; root row is zero."""

    values: np.ndarray  # (M, 2)


def project(p3d, intrinsics: CameraIntrinsics):
    """Perspective projection to pixels; accepts (3,) or (M, 3), taped or not."""
    z = value_of(p3d)[..., 2]
    if np.any(z <= 0.0):
        raise BehindCamera(f"depth must be positive, got min Z = {z.min():.4g}")
    if value_of(p3d).ndim == 1:
        u = intrinsics.fx * p3d[0] / p3d[2] + intrinsics.cx
        v = intrinsics.fy * p3d[1] / p3d[2] + intrinsics.cy
        return bk.stack([u, v])
    x, y, zz = p3d[:, 0], p3d[:, 1], p3d[:, 2]
    u = intrinsics.fx * (x / zz) + intrinsics.cx
    v = intrinsics.fy * (y / zz) + intrinsics.cy
    return bk.stack([u, v], axis=1)


def canonicalize(keypoints: Keypoints2D, intrinsics: CameraIntrinsics) -> CanonicalKeypoints:
    """Undo the intrinsics: ((u - cx)/fx, (v - cy)/fy) per joint."""
    p = keypoints.pixels
    out = np.empty_like(p)
    out[:, 0] = (p[:, 0] - intrinsics.cx) / intrinsics.fx
    out[:, 1] = (p[:, 1] - intrinsics.cy) / intrinsics.fy
    return CanonicalKeypoints(out)


def root_relative(keypoints: Keypoints2D, image_w: float, image_h: float, root_index: int = 0) -> RootRelativeKeypoints:
    """Subtract the root joint and normalise by image size."""
    if not (image_w > 0 and image_h > 0):
        raise ValueError(f"image dimensions must be positive, got {image_w} x {image_h}")
    p = keypoints.pixels
    out = np.empty_like(p)
    out[:, 0] = (p[:, 0] - p[root_index, 0]) / image_w
    out[:, 1] = (p[:, 1] - p[root_index, 1]) / image_h
    return RootRelativeKeypoints(out)


def fill_low_confidence(frames, threshold: float = 0.2):
    """Replace keypoints below the confidence threshold with the previous
    frame's value (first frame keeps its own detections regardless)."""
    filled = []
    prev = None
    for kp in frames:
        pixels = kp.pixels.copy()
        if kp.confidence is not None and prev is not None:
            low = kp.confidence < threshold
            pixels[low] = prev[low]
        filled.append(Keypoints2D(pixels, kp.confidence))
        prev = pixels
    return filled
