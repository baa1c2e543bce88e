"""Quaternion and rigid-transform tests against rotation-matrix oracles."""

import numpy as np
import pytest

from oracles import quat_exponential, quat_product_matrix_oracle
from physrefine import spatial as sp
from physrefine.spatial import AngularVelocity, RigidTransform, UnitQuaternion


def test_multiply_identity():
    q = sp.quat_from_axis_angle([0.3, 0.8, -0.5], 1.1)
    out = sp.quat_multiply(sp.quat_identity(), q)
    assert np.allclose(out, q, atol=1e-12)


def test_multiply_conjugate_gives_identity():
    q = sp.quat_from_axis_angle([1.0, 2.0, 0.5], 0.9)
    out = sp.quat_multiply(q, sp.quat_conjugate(q))
    assert np.allclose(out, sp.quat_identity(), atol=1e-12)


def test_two_quarter_turns_match_matrix_product():
    q90 = sp.quat_from_axis_angle([0, 0, 1], np.pi / 2)
    product = sp.quat_multiply(q90, q90)
    expected = quat_product_matrix_oracle(q90, q90)
    assert np.allclose(sp.quat_to_matrix(product), expected, atol=1e-12)
    assert np.allclose(np.abs(product), np.abs(sp.quat_from_axis_angle([0, 0, 1], np.pi)), atol=1e-12)


def test_multiply_random_vs_matrix_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a = rng.normal(0, 1, 4)
        a /= np.linalg.norm(a)
        b = rng.normal(0, 1, 4)
        b /= np.linalg.norm(b)
        prod = sp.quat_multiply(a, b)
        assert np.allclose(sp.quat_to_matrix(prod), quat_product_matrix_oracle(a, b), atol=1e-10)
        assert abs(np.linalg.norm(prod) - 1.0) < 1e-12


def test_integrate_zero_velocity():
    q = sp.quat_from_axis_angle([0.1, 0.9, 0.2], 0.7)
    out = sp.quat_integrate(q, np.zeros(3), 0.01)
    assert np.allclose(out, q, atol=1e-15)


def test_integrate_matches_exponential_for_small_step():
    omega = np.array([0.0, 0.0, np.pi])
    dt = 1e-4
    stepped = sp.quat_integrate(sp.quat_identity(), omega, dt)
    exact = sp.quat_multiply(quat_exponential(omega, dt), sp.quat_identity())
    err = sp.quat_error(exact, stepped)
    assert np.linalg.norm(err) < 1e-6


def test_integrate_renormalises():
    rng = np.random.default_rng(4)
    q = sp.quat_identity()
    for _ in range(200):
        q = sp.quat_integrate(q, rng.normal(0, 5, 3), 0.01)
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12


def test_integrate_at_least_second_order_convergence():
    # halving dt must cut the error by at least 4x; the renormalisation
    # cancels the parallel error component, so the measured ratio is ~8
    omega = np.array([1.3, -0.4, 2.0])
    q0 = sp.quat_from_axis_angle([0.2, 1.0, -0.3], 0.5)

    def error_at(dt):
        stepped = sp.quat_integrate(q0, omega, dt)
        exact = sp.quat_multiply(quat_exponential(omega, dt), q0)
        return np.linalg.norm(sp.quat_error(exact, stepped))

    e1 = error_at(2e-3)
    e2 = error_at(1e-3)
    ratio = e1 / e2
    assert ratio > 3.9, f"expected at least ~4, got {ratio}"


def test_error_of_equal_quaternions_is_zero():
    q = sp.quat_from_axis_angle([0.4, 0.1, 0.3], 1.2)
    assert np.allclose(sp.quat_error(q, q), 0.0, atol=1e-12)


def test_error_thirty_degrees_about_x():
    target = sp.quat_from_axis_angle([1, 0, 0], np.pi / 6)
    err = sp.quat_error(target, sp.quat_identity())
    assert np.allclose(err, [np.pi / 6, 0.0, 0.0], atol=1e-12)


def test_error_ignores_double_cover():
    q = sp.quat_from_axis_angle([0.2, -0.5, 0.8], 0.9)
    assert np.allclose(sp.quat_error(q, -q), 0.0, atol=1e-9)
    assert np.allclose(sp.quat_error(-q, q), 0.0, atol=1e-9)


def test_error_antisymmetric_for_small_angles():
    rng = np.random.default_rng(6)
    for _ in range(30):
        axis = rng.normal(0, 1, 3)
        a = sp.quat_from_axis_angle(axis, rng.uniform(0, 0.09))
        b = sp.quat_from_axis_angle(rng.normal(0, 1, 3), rng.uniform(0, 0.09))
        assert np.allclose(sp.quat_error(a, b), -sp.quat_error(b, a), atol=1e-9)


def test_unit_quaternion_rejects_bad_norm():
    with pytest.raises(ValueError):
        UnitQuaternion(1.0, 0.1, 0.0, 0.0)


def test_angular_velocity_rejects_nonfinite():
    with pytest.raises(ValueError):
        AngularVelocity(np.inf, 0.0, 0.0)


def test_rigid_transform_inverse_roundtrip():
    rng = np.random.default_rng(8)
    for _ in range(20):
        q = rng.normal(0, 1, 4)
        q /= np.linalg.norm(q)
        t = RigidTransform(UnitQuaternion.from_array(q), rng.normal(0, 2, 3))
        p = rng.normal(0, 1, 3)
        assert np.allclose(t.inverse().apply(t.apply(p)), p, atol=1e-9)


def test_rigid_transform_composition_associative():
    rng = np.random.default_rng(9)

    def random_transform():
        q = rng.normal(0, 1, 4)
        q /= np.linalg.norm(q)
        return RigidTransform(UnitQuaternion.from_array(q), rng.normal(0, 1, 3))

    a, b, c = random_transform(), random_transform(), random_transform()
    p = rng.normal(0, 1, 3)
    left = a.compose(b).compose(c).apply(p)
    right = a.compose(b.compose(c)).apply(p)
    assert np.allclose(left, right, atol=1e-9)


def test_canonical_representative():
    q = UnitQuaternion.from_array(-sp.quat_from_axis_angle([0, 1, 0], 0.4))
    canon = q.canonical()
    assert canon.w >= 0.0
    assert np.allclose(sp.quat_to_matrix(canon.to_array()), sp.quat_to_matrix(q.to_array()), atol=1e-12)
