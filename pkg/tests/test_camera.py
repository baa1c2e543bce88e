"""Camera projection and the two keypoint normalisations."""

import numpy as np
import pytest

from physrefine import autodiff as ad
from physrefine.camera import (
    BehindCamera,
    CameraIntrinsics,
    Keypoints2D,
    canonicalize,
    fill_low_confidence,
    project,
    root_relative,
)


def test_project_optical_axis():
    k = CameraIntrinsics(500.0, 500.0, 0.0, 0.0)
    assert np.allclose(project(np.array([0.0, 0.0, 1.0]), k), [0.0, 0.0])


def test_project_hand_computed():
    k = CameraIntrinsics(100.0, 100.0, 50.0, 50.0)
    assert np.allclose(project(np.array([1.0, 2.0, 2.0]), k), [100.0, 150.0])


def test_project_perspective_division():
    k = CameraIntrinsics(400.0, 400.0, 320.0, 240.0)
    p = np.array([0.8, -0.2, 2.0])
    u1 = project(p, k)
    u2 = project(p * np.array([1.0, 1.0, 2.0]), k)
    assert np.allclose(u2[0] - k.cx, (u1[0] - k.cx) / 2.0)


def test_project_rejects_nonpositive_depth():
    k = CameraIntrinsics(100.0, 100.0, 0.0, 0.0)
    with pytest.raises(BehindCamera):
        project(np.array([0.0, 0.0, -1.0]), k)
    with pytest.raises(BehindCamera):
        project(np.array([[0.1, 0.1, 1.0], [0.0, 0.0, 0.0]]), k)


def test_project_is_differentiable():
    k = CameraIntrinsics(700.0, 650.0, 320.0, 240.0)
    rng = np.random.default_rng(0)
    p0 = np.array([[0.3, -0.2, 2.5], [0.1, 0.4, 3.0]])
    w = rng.normal(0, 1, (2, 2))
    report = ad.finite_diff_check(lambda p: ad.tsum(project(p, k) * w), ad.Tensor(p0), rel_tol=1e-5)
    assert report.ok, report


def test_canonicalize_identity_intrinsics_pass_through():
    k = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
    pixels = np.array([[0.3, -0.5], [1.2, 0.9]])
    out = canonicalize(Keypoints2D(pixels), k)
    assert np.allclose(out.values, pixels)


def test_canonicalize_inverts_projection():
    k = CameraIntrinsics(870.0, 912.0, 481.0, 520.0)
    rng = np.random.default_rng(1)
    pts = rng.normal(0, 0.5, (17, 3))
    pts[:, 2] = rng.uniform(2.0, 5.0, 17)
    pixels = np.asarray(project(pts, k))
    out = canonicalize(Keypoints2D(pixels), k)
    assert np.allclose(out.values, pts[:, 0:2] / pts[:, 2:3], atol=1e-12)


def test_canonical_keypoints_independent_of_intrinsics():
    rng = np.random.default_rng(2)
    pts = rng.normal(0, 0.5, (17, 3))
    pts[:, 2] = rng.uniform(2.0, 5.0, 17)
    k1 = CameraIntrinsics(600.0, 580.0, 300.0, 260.0)
    k2 = CameraIntrinsics(1400.0, 1450.0, 512.0, 511.0)
    c1 = canonicalize(Keypoints2D(np.asarray(project(pts, k1))), k1)
    c2 = canonicalize(Keypoints2D(np.asarray(project(pts, k2))), k2)
    assert np.abs(c1.values - c2.values).max() < 1e-12


def test_canonicalize_then_scale_by_depth_recovers_xy():
    k = CameraIntrinsics(777.0, 801.0, 333.0, 444.0)
    rng = np.random.default_rng(3)
    pts = rng.normal(0, 0.6, (8, 3))
    pts[:, 2] = rng.uniform(1.5, 6.0, 8)
    pixels = np.asarray(project(pts, k))
    canon = canonicalize(Keypoints2D(pixels), k)
    recovered = canon.values * pts[:, 2:3]
    assert np.allclose(recovered, pts[:, 0:2], atol=1e-12)


def test_root_relative_root_row_is_zero():
    rng = np.random.default_rng(4)
    pixels = rng.uniform(0, 1000, (17, 2))
    out = root_relative(Keypoints2D(pixels), 1000, 800)
    assert np.allclose(out.values[0], 0.0)


def test_root_relative_translation_invariance():
    rng = np.random.default_rng(5)
    pixels = rng.uniform(0, 1000, (17, 2))
    a = root_relative(Keypoints2D(pixels), 1000, 800)
    b = root_relative(Keypoints2D(pixels + np.array([37.0, -12.0])), 1000, 800)
    assert np.allclose(a.values, b.values, atol=1e-12)


def test_root_relative_hand_computed():
    pixels = np.array([[100.0, 200.0], [150.0, 260.0], [60.0, 180.0]])
    out = root_relative(Keypoints2D(pixels), 500.0, 400.0)
    expected = np.array([[0.0, 0.0], [0.1, 0.15], [-0.08, -0.05]])
    assert np.allclose(out.values, expected, atol=1e-12)


def test_root_relative_rejects_bad_image_size():
    with pytest.raises(ValueError):
        root_relative(Keypoints2D(np.zeros((3, 2))), 0, 100)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(-1.0, 100.0, 0.0, 0.0)


def test_fill_low_confidence_replicates_previous():
    k0 = Keypoints2D(np.array([[10.0, 10.0], [20.0, 20.0]]), np.array([0.9, 0.9]))
    k1 = Keypoints2D(np.array([[11.0, 11.0], [99.0, 99.0]]), np.array([0.9, 0.05]))
    filled = fill_low_confidence([k0, k1], threshold=0.2)
    assert np.allclose(filled[1].pixels[0], [11.0, 11.0])
    assert np.allclose(filled[1].pixels[1], [20.0, 20.0])  # replicated
