"""Hard non-penetration constraint as a differentiable velocity projection.

Each active contact contributes one inequality: the floor-frame normal
velocity of its contact point must be non-negative. The post-dynamics
generalized velocity is replaced by the closest feasible one,

    min || qd* - qd ||^2   s.t.   n_k . qd* >= margin  for active contacts,

an identity-Hessian QP solved exactly by active-set pivoting (at most four
constraints). The solution map is piecewise linear; its derivative is the
orthogonal projector onto the nullspace of the strictly active rows, which
is what the backward pass applies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend as bk
from .autodiff import Tensor, custom_op
from .backend import value_of
from .spatial import RigidTransform, UnitQuaternion

ACTIVE_TOL = 1e-10
MAX_PIVOTS = 64


class ProjectionFailure(RuntimeError):
    """Active-set iteration failed to reach a KKT point (should not happen)."""


@dataclass(frozen=True)
class FloorModel:
    """Camera-to-floor transform; one floor axis is the upward normal."""

    transform: RigidTransform
    normal_axis: int = 1

    @staticmethod
    def identity() -> "FloorModel":
        return FloorModel(RigidTransform.identity(), 1)

    @staticmethod
    def from_point_normal(point, normal, normal_axis: int = 1) -> "FloorModel":
        """Floor frame whose ``normal_axis`` aligns with the given camera-frame
        normal and whose origin height is zero at ``point``."""
        normal = np.asarray(normal, dtype=np.float64)
        n = normal / np.linalg.norm(normal)
        target = np.zeros(3)
        target[normal_axis] = 1.0
        # Rotation taking n to the target axis (camera -> floor).
        c = float(n @ target)
        if c > 1.0 - 1e-12:
            rot = UnitQuaternion.identity()
        elif c < -1.0 + 1e-12:
            # Antiparallel: rotate pi about any axis orthogonal to n.
            helper = np.array([1.0, 0.0, 0.0])
            if abs(n[0]) > 0.9:
                helper = np.array([0.0, 1.0, 0.0])
            axis = np.cross(n, helper)
            axis /= np.linalg.norm(axis)
            rot = UnitQuaternion.from_array(np.concatenate([[0.0], axis]))
        else:
            axis = np.cross(n, target)
            s = np.linalg.norm(axis)
            axis = axis / s
            half = 0.5 * np.arctan2(s, c)
            rot = UnitQuaternion.from_array(
                np.concatenate([[np.cos(half)], np.sin(half) * axis])
            )
        r = rot.to_array()
        from .spatial import quat_to_matrix

        rmat = quat_to_matrix(r)
        trans = -(rmat @ np.asarray(point, dtype=np.float64))
        return FloorModel(RigidTransform(rot, trans), normal_axis)

    def rotation(self) -> np.ndarray:
        return self.transform.matrix()

    def normal_row(self) -> np.ndarray:
        """Camera-frame row vector r with r . v = floor-frame normal velocity."""
        return self.rotation()[self.normal_axis]

    def height_of(self, p_cam) -> float:
        """Signed height of a camera-frame point above the floor plane."""
        p = self.transform.apply(value_of(p_cam))
        return float(p[self.normal_axis])

    def gravity_camera(self, g_floor=None) -> np.ndarray:
        """Floor-frame gravity rotated into the camera frame."""
        if g_floor is None:
            g_floor = np.array([0.0, -9.81, 0.0])
        return self.rotation().T @ np.asarray(g_floor, dtype=np.float64)

    def to_floor(self, vec_cam):
        return self.rotation() @ vec_cam

    def to_camera(self, vec_floor):
        return self.rotation().T @ vec_floor


@dataclass
class ProjectionResult:
    """Projected velocity plus the local linearisation of the solution map."""

    qd_star: object
    active_set: list
    jacobian: np.ndarray
    rows: np.ndarray
    multipliers: np.ndarray
    degenerate: bool = False
    normal_velocities: np.ndarray = field(default_factory=lambda: np.zeros(0))


def contact_velocity(contact_jac, qd, floor: FloorModel):
    """Floor-frame linear velocity of each contact point, stacked (n_c, 3)."""
    jv = value_of(contact_jac)
    spatial = jv @ value_of(qd)
    n_c = spatial.shape[0] // 6
    r = floor.rotation()
    return np.stack([r @ spatial[6 * i : 6 * i + 3] for i in range(n_c)])


def normal_rows(contact_jac, floor: FloorModel) -> np.ndarray:
    """One row per contact mapping qd to its floor-normal velocity."""
    jac = value_of(contact_jac)
    n_c = jac.shape[0] // 6
    n_row = floor.normal_row()
    return np.stack([n_row @ jac[6 * i : 6 * i + 3] for i in range(n_c)])


def _solve_working_set(rows, y, b, working):
    """Equality-constrained closest point and its multipliers (least-norm)."""
    if not working:
        return y.copy(), np.zeros(0), False
    n_w = rows[working]
    rhs = b[working] - n_w @ y
    gram = n_w @ n_w.T
    degenerate = False
    try:
        mu = np.linalg.solve(gram, rhs)
        if np.linalg.cond(gram) > 1e10:
            degenerate = True
            mu = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    except np.linalg.LinAlgError:
        degenerate = True
        mu = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    return y + n_w.T @ mu, mu, degenerate


def _active_set_solve(rows, y, b):
    """Exact projection onto {x : rows @ x >= b} by active-set pivoting."""
    m = rows.shape[0]
    working: list = []
    degenerate_seen = False
    for _ in range(MAX_PIVOTS):
        x, mu, degenerate = _solve_working_set(rows, y, b, working)
        degenerate_seen = degenerate_seen or degenerate
        slack = rows @ x - b
        candidates = [k for k in range(m) if k not in working and slack[k] < -ACTIVE_TOL]
        if candidates:
            worst = min(candidates, key=lambda k: slack[k])
            working.append(worst)
            continue
        if mu.size and mu.min() < -ACTIVE_TOL:
            working.pop(int(np.argmin(mu)))
            continue
        return x, working, mu, degenerate_seen
    raise ProjectionFailure(f"no KKT point within {MAX_PIVOTS} pivots")


def _nullspace_projector(rows_active: np.ndarray, n: int) -> np.ndarray:
    if rows_active.shape[0] == 0:
        return np.eye(n)
    pinv = np.linalg.pinv(rows_active, rcond=1e-12)
    return np.eye(n) - pinv @ rows_active


def project_velocity(qd, contact_jac, floor: FloorModel, active_contacts=None, margin: float = 0.0) -> ProjectionResult:
    """Clamp contact-point normal velocities at >= margin, minimally in q-dot.

    ``active_contacts`` selects rows of the stacked contact Jacobian (default
    all). The result carries the projector onto the strictly-active
    constraint nullspace, which is both d(qd*)/d(qd) and the backward rule.
    When ``qd`` is taped the output stays on the tape with that rule.
    """
    rows_all = normal_rows(contact_jac, floor)
    if active_contacts is not None:
        rows_all = rows_all[list(active_contacts)]
    n_con, n_v = rows_all.shape
    y = value_of(qd)
    b = np.full(n_con, margin)
    x, working, mu, degenerate = _active_set_solve(rows_all, y, b)
    # Strictly active constraints only: weakly active ones (zero multiplier)
    # behave like inactive for the local linearisation.
    strict = [k for k, m_k in zip(working, mu) if m_k > ACTIVE_TOL]
    projector = _nullspace_projector(rows_all[strict], n_v)
    multipliers = np.zeros(n_con)
    for k, m_k in zip(working, mu):
        multipliers[k] = m_k
    result = ProjectionResult(
        qd_star=x,
        active_set=sorted(strict),
        jacobian=projector,
        rows=rows_all,
        multipliers=multipliers,
        degenerate=degenerate,
        normal_velocities=rows_all @ x,
    )
    if isinstance(qd, Tensor):

        def bwd(g):
            return (projector @ g,)

        result.qd_star = custom_op(x, (qd,), bwd)
    return result


def projection_backward(result: ProjectionResult, upstream_grad) -> np.ndarray:
    """Pull an upstream gradient through the projection (fixed active set)."""
    return result.jacobian @ np.asarray(upstream_grad, dtype=np.float64)
