"""Skeleton model, file parsing, forward kinematics, joint limits."""

import numpy as np
import pytest

from physrefine import autodiff as ad
from physrefine.skeleton import (
    HUMANOID_DOFS,
    PoseVector,
    SkeletonFileError,
    VelocityVector,
    contact_site_positions,
    forward_kinematics,
    joint_limit_penalty,
    load_skeleton,
    parse_skeleton,
)
from physrefine.spatial import UnitQuaternion, quat_from_axis_angle


@pytest.fixture(scope="module")
def model():
    return load_skeleton()


def rest_pose(model):
    q = np.zeros(model.n_q)
    q[3] = 1.0
    return q


def test_bundled_model_shape(model):
    assert model.n_dof == HUMANOID_DOFS
    assert model.n_q == 47
    assert model.n_v == 46
    assert len(model.contact_sites) == 4
    assert len(model.keypoints) == 17
    assert 55.0 < model.total_mass < 90.0


def test_rest_pose_positions_match_model_file(model):
    q = rest_pose(model)
    joints = np.asarray(forward_kinematics(model, q))
    by_name = {kp.name: joints[i] for i, kp in enumerate(model.keypoints)}
    assert np.allclose(by_name["pelvis"], [0, 0, 0], atol=1e-12)
    # arms extend along +/- x in the rest pose, legs run straight down
    assert by_name["l_wrist"][0] > by_name["l_elbow"][0] > by_name["l_shoulder"][0] > 0
    assert by_name["r_wrist"][0] < by_name["r_elbow"][0] < by_name["r_shoulder"][0] < 0
    assert abs(by_name["l_ankle"][0] - 0.09) < 1e-12
    assert by_name["l_ankle"][1] < by_name["l_knee"][1] < by_name["l_hip"][1]
    assert by_name["head_top"][1] > 1.5 - 0.95  # ~1.65 m tall with root at 0.95


def test_translation_equivariance(model):
    q = rest_pose(model)
    base = np.asarray(forward_kinematics(model, q))
    q2 = q.copy()
    q2[0:3] = [1.0, 2.0, 3.0]
    shifted = np.asarray(forward_kinematics(model, q2))
    assert np.allclose(shifted, base + np.array([1.0, 2.0, 3.0]), atol=1e-12)


def test_single_knee_rotation_hand_computed(model):
    # bending one knee 90 degrees rotates the shank about the knee's x-axis:
    # the ankle moves from straight below the knee to behind it
    q = rest_pose(model)
    j = model.joint_index("l_knee_x")
    q[7 + j] = np.pi / 2
    joints = np.asarray(forward_kinematics(model, q))
    names = [kp.name for kp in model.keypoints]
    knee = joints[names.index("l_knee")]
    ankle = joints[names.index("l_ankle")]
    shank = 0.40
    expected = knee + np.array([0.0, -shank * np.cos(np.pi / 2), -shank * np.sin(np.pi / 2)])
    assert np.allclose(ankle, expected, atol=1e-12)


def test_contact_sites_rest_and_rigid_rotation(model):
    q = rest_pose(model)
    sites = np.asarray(contact_site_positions(model, q))
    assert sites.shape == (4, 3)
    assert np.allclose(sites[:, 1], sites[0, 1], atol=1e-12)  # all at one height
    # rigid root rotation rotates sites rigidly
    rot = quat_from_axis_angle([0, 1, 0], 0.8)
    q2 = q.copy()
    q2[3:7] = rot
    from physrefine.spatial import quat_to_matrix

    expected = (quat_to_matrix(rot) @ sites.T).T
    assert np.allclose(np.asarray(contact_site_positions(model, q2)), expected, atol=1e-12)


def test_ankle_flexion_preserves_heel_to_ankle_distance(model):
    q = rest_pose(model)
    names = [kp.name for kp in model.keypoints]

    def heel_to_ankle(qv):
        sites = np.asarray(contact_site_positions(model, qv))
        joints = np.asarray(forward_kinematics(model, qv))
        return np.linalg.norm(sites[1] - joints[names.index("l_ankle")])

    base_sites = np.asarray(contact_site_positions(model, q))
    d0 = heel_to_ankle(q)
    q[7 + model.joint_index("l_ankle_x")] = 0.4
    d1 = heel_to_ankle(q)
    moved_sites = np.asarray(contact_site_positions(model, q))
    assert abs(d0 - d1) < 1e-12
    assert np.linalg.norm(moved_sites[0] - base_sites[0]) > 1e-3  # left toe moved


def test_bone_lengths_constant_over_pose(model):
    rng = np.random.default_rng(0)
    names = [kp.name for kp in model.keypoints]
    pairs = [("l_hip", "l_knee"), ("l_knee", "l_ankle"), ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist")]

    def lengths(qv):
        joints = np.asarray(forward_kinematics(model, qv))
        return np.array(
            [np.linalg.norm(joints[names.index(a)] - joints[names.index(b)]) for a, b in pairs]
        )

    ref = lengths(rest_pose(model))
    for _ in range(20):
        q = np.zeros(model.n_q)
        q[0:3] = rng.normal(0, 1, 3)
        quat = rng.normal(0, 1, 4)
        q[3:7] = quat / np.linalg.norm(quat)
        q[7:] = rng.uniform(model.limits_lo, model.limits_hi)
        assert np.allclose(lengths(q), ref, atol=1e-10)


def test_fk_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(1)
    for _ in range(5):
        q = np.zeros(model.n_q)
        q[0:3] = rng.normal(0, 0.5, 3)
        quat = rng.normal(0, 1, 4)
        q[3:7] = quat / np.linalg.norm(quat)
        q[7:] = rng.uniform(model.limits_lo, model.limits_hi) * 0.5

        weights = rng.normal(0, 1, (len(model.keypoints), 3))

        def f(qt):
            return ad.tsum(forward_kinematics(model, qt) * weights)

        report = ad.finite_diff_check(f, ad.Tensor(q), rel_tol=1e-5)
        assert report.ok, report


def test_joint_limit_penalty_zero_inside(model):
    assert joint_limit_penalty(model, np.zeros(model.n_dof)) == 0.0
    assert joint_limit_penalty(model, (model.limits_lo + model.limits_hi) / 2.0) == 0.0


def test_joint_limit_penalty_single_violation(model):
    angles = np.zeros(model.n_dof)
    angles[0] = model.limits_hi[0] + 0.1
    assert abs(joint_limit_penalty(model, angles) - 0.01) < 1e-12


def test_joint_limit_penalty_sums_squared_excesses(model):
    angles = np.zeros(model.n_dof)
    angles[3] = model.limits_hi[3] + 0.2
    angles[5] = model.limits_lo[5] - 0.3
    expected = 0.2**2 + 0.3**2
    assert abs(joint_limit_penalty(model, angles) - expected) < 1e-12


def test_joint_limit_penalty_c1_at_boundary(model):
    # derivative approaches zero from both sides of the limit
    j = 4
    eps = 1e-7

    def penalty_at(delta):
        angles = np.zeros(model.n_dof)
        angles[j] = model.limits_hi[j] + delta
        return joint_limit_penalty(model, angles)

    slope_out = (penalty_at(2 * eps) - penalty_at(eps)) / eps
    slope_in = (penalty_at(-eps) - penalty_at(-2 * eps)) / eps
    assert abs(slope_out) < 1e-5
    assert abs(slope_in) < 1e-12


def test_pose_and_velocity_vector_round_trip(model):
    rng = np.random.default_rng(2)
    quat = rng.normal(0, 1, 4)
    quat /= np.linalg.norm(quat)
    pose = PoseVector(rng.normal(0, 1, 3), UnitQuaternion.from_array(quat), rng.normal(0, 1, 40))
    arr = pose.to_array()
    assert arr.shape == (47,)
    back = PoseVector.from_array(arr)
    assert np.allclose(back.to_array(), arr)
    vel = VelocityVector.from_array(rng.normal(0, 1, 46))
    assert vel.to_array().shape == (46,)


# -- parser rejections ----------------------------------------------------------


MINI = """
skeleton mini
link root
  mass 1.0
  com 0 0 0
  inertia 0.1 0.1 0.1 0 0 0
joint j0
  parent root
  axis 0 0 1
  offset 0 0 0
  limits -1 1
  mass 1.0
  com 0.1 0 0
  inertia 0.01 0.01 0.01 0 0 0
"""


def test_parser_accepts_minimal_chain():
    model = parse_skeleton(MINI, require_humanoid=False)
    assert model.n_dof == 1


def test_parser_rejects_non_humanoid_when_required():
    with pytest.raises(SkeletonFileError):
        parse_skeleton(MINI, require_humanoid=True)


@pytest.mark.parametrize(
    "mutation,needle",
    [
        (("mass 1.0", "mass -2.0", 1), "mass must be positive"),
        (("limits -1 1", "limits 1 -1", 1), "limits"),
        (("parent root", "parent nowhere", 1), "unknown link"),
        (("axis 0 0 1", "axis 0 0 0", 1), "axis"),
        (("inertia 0.01 0.01 0.01 0 0 0", "inertia 1.0 0.01 0.01 0 0 0", 1), "triangle"),
        (("com 0.1 0 0", "com 0.1 0", 1), "com expects 3"),
    ],
)
def test_parser_rejects_invalid_files_with_line_numbers(mutation, needle):
    old, new, count = mutation
    text = MINI.replace(old, new, count)
    with pytest.raises(SkeletonFileError) as err:
        parse_skeleton(text, require_humanoid=False)
    assert needle.lower() in str(err.value).lower()
    assert "line" in str(err.value)


def test_parser_rejects_duplicate_keys():
    text = MINI.replace("  axis 0 0 1", "  axis 0 0 1\n  axis 1 0 0", 1)
    with pytest.raises(SkeletonFileError):
        parse_skeleton(text, require_humanoid=False)


def test_parser_rejects_key_outside_block():
    with pytest.raises(SkeletonFileError):
        parse_skeleton("skeleton x\nmass 1.0\n", require_humanoid=False)
