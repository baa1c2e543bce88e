"""Quaternion and rigid-transform primitives.

Conventions, used everywhere downstream:
  - scalar-first storage [w, x, y, z], Hamilton product;
  - q maps body vectors into the reference frame: v_ref = R(q) v_body;
  - angular velocity is expressed in the reference frame, so the kinematic
    rate is q_dot = 0.5 * [0, w] (x) q.

The array-level functions accept numpy arrays or taped tensors; the small
value classes at the bottom are the validated public carriers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend as bk
from .backend import value_of

UNIT_NORM_TOL = 1e-9


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    return q * (1.0 / bk.norm(q))


def quat_conjugate(q):
    return bk.concat([q[0:1], -q[1:4]])


def quat_multiply(a, b):
    """Hamilton product a (x) b, renormalised to absorb drift."""
    aw, ax, ay, az = a[0], a[1], a[2], a[3]
    bw, bx, by, bz = b[0], b[1], b[2], b[3]
    out = bk.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )
    return quat_normalize(out)


def quat_integrate(q, omega, dt: float):
    """First-order orientation update q' = normalize(q + dt * 0.5 [0,w](x)q).

    omega is the reference-frame angular velocity in rad/s. The raw product
    is used unrenormalised inside the rate term; the result is renormalised,
    which keeps every returned quaternion on the unit sphere.
    """
    rate = _quat_multiply_raw(bk.concat([_zero_like_scalar(omega), omega]), q)
    return quat_normalize(q + (0.5 * dt) * rate)


def _zero_like_scalar(omega):
    if bk.is_tensor(omega):
        return omega[0:1] * 0.0
    return np.zeros(1)


def _quat_multiply_raw(a, b):
    aw, ax, ay, az = a[0], a[1], a[2], a[3]
    bw, bx, by, bz = b[0], b[1], b[2], b[3]
    return bk.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_error(target, current):
    """Rotation vector (axis * angle, rad) taking ``current`` to ``target``.

    Computed from target (x) conjugate(current) with the sign canonicalised
    to w >= 0, so the angle lands in [0, pi] and the antipodal encodings q
    and -q give an identical (zero) error.
    """
    r = _quat_multiply_raw(target, quat_conjugate(current))
    if float(value_of(r[0])) < 0.0:
        r = -r
    w, v = r[0], r[1:4]
    n = float(np.linalg.norm(value_of(v)))
    if n < 1e-9:
        # Small-angle limit of v/|v| * 2*atan2(|v|, w)  ->  2 v / w.
        return v * (2.0 / w)
    angle = 2.0 * bk.atan2(bk.norm(v), w)
    return v * (angle / bk.norm(v))


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion: (w^2-|v|^2)I + 2vv^T + 2w[v]x."""
    w, v = q[0], q[1:4]
    return (w * w - v @ v) * bk.eye3() + 2.0 * bk.outer(v, v) + (2.0 * w) * bk.skew(v)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def axis_rotation_matrix(axis: np.ndarray, angle):
    """Rodrigues rotation about a fixed unit axis; angle may be taped."""
    k = bk.skew(axis)
    a_outer = np.outer(axis, axis)
    c = bk.cos(angle)
    return c * bk.eye3() + bk.sin(angle) * k + (1.0 - c) * a_outer


# -- validated value types ------------------------------------------------------


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit-norm orientation, scalar first."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if abs(n - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"quaternion norm {n} deviates from 1 beyond {UNIT_NORM_TOL}")

    @staticmethod
    def identity() -> "UnitQuaternion":
        return UnitQuaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_array(q) -> "UnitQuaternion":
        q = np.asarray(value_of(q), dtype=np.float64)
        q = q / np.linalg.norm(q)
        return UnitQuaternion(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    def to_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def canonical(self) -> "UnitQuaternion":
        """Flip to the w >= 0 representative (comparison boundaries only)."""
        if self.w < 0.0:
            return UnitQuaternion(-self.w, -self.x, -self.y, -self.z)
        return self

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def __matmul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        return UnitQuaternion.from_array(quat_multiply(self.to_array(), other.to_array()))

    def rotate(self, p) -> np.ndarray:
        return quat_to_matrix(self.to_array()) @ np.asarray(p, dtype=np.float64)


@dataclass(frozen=True)
class AngularVelocity:
    """rad/s, in whatever frame the caller states."""

    wx: float
    wy: float
    wz: float

    def __post_init__(self):
        if not (math.isfinite(self.wx) and math.isfinite(self.wy) and math.isfinite(self.wz)):
            raise ValueError("angular velocity components must be finite")

    def to_array(self) -> np.ndarray:
        return np.array([self.wx, self.wy, self.wz])


@dataclass(frozen=True)
class RigidTransform:
    """Rotation-then-translation map p -> R p + t, metres."""

    rotation: UnitQuaternion
    translation: np.ndarray

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(UnitQuaternion.identity(), np.zeros(3))

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation.to_array())

    def apply(self, p):
        """Map a point; taped inputs stay taped."""
        return self.matrix() @ p + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        rot = self.rotation @ other.rotation
        trans = self.matrix() @ other.translation + self.translation
        return RigidTransform(rot, trans)

    def inverse(self) -> "RigidTransform":
        inv_rot = self.rotation.conjugate()
        inv_trans = -(quat_to_matrix(inv_rot.to_array()) @ self.translation)
        return RigidTransform(inv_rot, inv_trans)
