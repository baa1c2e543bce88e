"""Floating-base rigid-body dynamics in generalized coordinates.

Everything is expressed in the camera (world) frame. The generalized
velocity is [v_root (3), w_root (3), joint rates (n_dof)], where v_root is
the velocity of the root-link origin and w_root the root angular velocity,
both in the world frame.

The mass matrix and bias forces come from per-body point Jacobians:

    M = sum_b  m_b Jv_b^T Jv_b + Jw_b^T I_b Jw_b
    h = sum_b  Jv_b^T m_b (a0_b - g) + Jw_b^T (I_b al0_b + w_b x I_b w_b)

with a0/al0 the zero-joint-acceleration (velocity-product) accelerations of
each body COM. This trades a constant factor against composite-rigid-body
recursions for term-by-term verifiability. Two implementations share the
formulas: a vectorised numpy path used per simulation step, and a generic
path over taped tensors used during training (gradients flow through FK,
M, h and J).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend as bk
from .backend import value_of
from .skeleton import SkeletonModel, link_frames
from .spatial import quat_integrate

GRAVITY_FLOOR = np.array([0.0, -9.81, 0.0])
CONDITION_LIMIT = 1e12

_EYE3 = np.eye(3)


def _cross(a, b):
    return np.array(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def _cross_rows(a, b):
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


class EmptyContacts(ValueError):
    """A contact-dependent quantity was requested with no active contacts."""


class SingularMass(ArithmeticError):
    """Mass matrix conditioning exceeds the usable range."""


@dataclass
class DynamicsQuantities:
    """Per-step snapshot of the equation-of-motion terms at (q, q_dot).

    J stacks six rows per active contact (linear velocity of the contact
    point, then angular velocity of its link); G maps the per-contact force
    3-vectors to the matching wrenches.
    """

    mass: object  # (n_v, n_v)
    bias: object  # (n_v,)
    contact_jac: object  # (6 n_c, n_v) or None
    grf_to_wrench: object  # (6 n_c, 3 n_c) or None
    n_contacts: int
    active_links: tuple = ()
    contact_points: object = None  # (n_c, 3) world positions


# -- generic (taped) path -------------------------------------------------------


class _BodyFrames:
    """One FK pass: frames, world joint axes, world COMs and inertias."""

    __slots__ = ("rots", "origins", "axes", "coms", "inertias")

    def __init__(self, model: SkeletonModel, q):
        self.rots, self.origins = link_frames(model, q)
        self.axes = [
            self.rots[j.parent] @ j.axis for j in model.joints
        ]
        self.coms = []
        self.inertias = []
        for i, link in enumerate(model.links):
            r = self.rots[i]
            self.coms.append(self.origins[i] + r @ link.com)
            self.inertias.append(r @ link.inertia @ bk.transpose(r))


def _point_jacobians_taped(model, frames, link, point, want_angular=True):
    # compact columns (root blocks + one per path DoF) scattered into the
    # full layout by a constant selection matrix
    scatter = model.jac_scatter[link]
    cols_v = [_EYE3, bk.skew(frames.origins[0] - point)]
    cols_w = [np.zeros((3, 3)), _EYE3] if want_angular else None
    for k in model.path_dofs[link]:
        a = frames.axes[k]
        cols_v.append(bk.reshape(bk.cross3(a, point - frames.origins[k + 1]), (3, 1)))
        if want_angular:
            cols_w.append(bk.reshape(a, (3, 1)))
    jv = bk.concat(cols_v, axis=1) @ scatter
    jw = (bk.concat(cols_w, axis=1) @ scatter) if want_angular else None
    return jv, jw


def _body_velocities(model, frames, qd):
    """World angular velocity of each link and velocity of each link origin."""
    omegas = [qd[3:6]]
    vels = [qd[0:3]]
    for j, joint in enumerate(model.joints):
        par = joint.parent
        arm = frames.origins[j + 1] - frames.origins[par]
        omegas.append(omegas[par] + frames.axes[j] * qd[6 + j])
        vels.append(vels[par] + bk.cross3(omegas[par], arm))
    return omegas, vels


def _body_bias_accelerations(model, frames, qd, omegas):
    """Velocity-product accelerations of link origins at zero joint accel."""
    zero3 = np.zeros(3)
    alphas = [zero3]
    accels = [zero3]
    for j, joint in enumerate(model.joints):
        par = joint.parent
        arm = frames.origins[j + 1] - frames.origins[par]
        alphas.append(alphas[par] + bk.cross3(omegas[par], frames.axes[j]) * qd[6 + j])
        accels.append(
            accels[par]
            + bk.cross3(alphas[par], arm)
            + bk.cross3(omegas[par], bk.cross3(omegas[par], arm))
        )
    return alphas, accels


def _com_jacobians_taped(model, frames):
    return [
        _point_jacobians_taped(model, frames, i, frames.coms[i])
        for i in range(len(model.links))
    ]


def _mass_matrix_taped(model, frames, jacs=None):
    jacs = jacs or _com_jacobians_taped(model, frames)
    total = None
    for i, link in enumerate(model.links):
        jv, jw = jacs[i]
        term = link.mass * (bk.transpose(jv) @ jv) + bk.transpose(jw) @ (frames.inertias[i] @ jw)
        total = term if total is None else total + term
    return total


def _bias_taped(model, frames, qd, gravity, jacs=None):
    jacs = jacs or _com_jacobians_taped(model, frames)
    omegas, _ = _body_velocities(model, frames, qd)
    alphas, accels = _body_bias_accelerations(model, frames, qd, omegas)
    total = None
    for i, link in enumerate(model.links):
        arm = frames.coms[i] - frames.origins[i]
        acc_com = (
            accels[i]
            + bk.cross3(alphas[i], arm)
            + bk.cross3(omegas[i], bk.cross3(omegas[i], arm))
        )
        force = link.mass * (acc_com - gravity)
        torque = frames.inertias[i] @ alphas[i] + bk.cross3(
            omegas[i], frames.inertias[i] @ omegas[i]
        )
        jv, jw = jacs[i]
        term = bk.transpose(jv) @ force + bk.transpose(jw) @ torque
        total = term if total is None else total + term
    return total


def _contact_jacobian_taped(model, frames, active_links, points=None):
    blocks = []
    for idx, link in enumerate(active_links):
        point = frames.origins[link] if points is None else points[idx]
        jv, jw = _point_jacobians_taped(model, frames, link, point)
        blocks.append(jv)
        blocks.append(jw)
    return bk.concat(blocks, axis=0)


# -- vectorised numpy path ------------------------------------------------------


class _FastFrames:
    """Stacked-array FK pass for the per-step simulation path."""

    __slots__ = ("rots", "origins", "axes", "coms", "inertias")

    def __init__(self, model: SkeletonModel, q):
        q = value_of(q)
        n_dof = model.n_dof
        nb = n_dof + 1
        quat = q[3:7]
        quat = quat / np.linalg.norm(quat)
        w, v = quat[0], quat[1:]
        root_rot = (
            (w * w - v @ v) * _EYE3
            + 2.0 * np.outer(v, v)
            + 2.0 * w * np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
        )
        ang = q[7:]
        c, s = np.cos(ang), np.sin(ang)
        joint_rots = (
            c[:, None, None] * _EYE3
            + s[:, None, None] * model.axis_skews
            + (1.0 - c)[:, None, None] * model.axis_outers
        )
        rots = np.empty((nb, 3, 3))
        origins = np.empty((nb, 3))
        rots[0] = root_rot
        origins[0] = q[0:3]
        parents = model.joint_parents
        offsets = model.joint_offsets
        for j in range(n_dof):
            par = parents[j]
            rots[j + 1] = rots[par] @ joint_rots[j]
            origins[j + 1] = origins[par] + rots[par] @ offsets[j]
        self.rots = rots
        self.origins = origins
        self.axes = (
            (rots[parents] @ model.joint_axes[:, :, None]).squeeze(-1)
            if n_dof
            else np.zeros((0, 3))
        )
        self.coms = origins + (rots @ model.link_coms[:, :, None]).squeeze(-1)
        self.inertias = rots @ model.link_inertias @ rots.transpose(0, 2, 1)


def _skew_batch(r):
    s = np.zeros(r.shape[:-1] + (3, 3))
    s[..., 0, 1] = -r[..., 2]
    s[..., 0, 2] = r[..., 1]
    s[..., 1, 0] = r[..., 2]
    s[..., 1, 2] = -r[..., 0]
    s[..., 2, 0] = -r[..., 1]
    s[..., 2, 1] = r[..., 0]
    return s


def _com_jacobians_np(model, frames):
    """(nb, 3, n_v) linear and angular Jacobians of every link COM."""
    nb = len(model.links)
    n_v = model.n_v
    jv = np.zeros((nb, 3, n_v))
    jw = np.zeros((nb, 3, n_v))
    jv[:, :, 0:3] = _EYE3
    jv[:, :, 3:6] = _skew_batch(frames.origins[0] - frames.coms)
    jw[:, :, 3:6] = _EYE3
    b_idx, k_idx = model.jac_pair_links, model.jac_pair_dofs
    if b_idx.size:
        cr = _cross_rows(frames.axes[k_idx], frames.coms[b_idx] - frames.origins[k_idx + 1])
        jv[b_idx, :, 6 + k_idx] = cr
        jw[b_idx, :, 6 + k_idx] = frames.axes[k_idx]
    return jv, jw


def _mass_matrix_np(model, frames, jv, jw):
    weighted = jv * model.link_masses[:, None, None]
    m = np.tensordot(weighted, jv, axes=([0, 1], [0, 1]))
    m += np.tensordot(jw, frames.inertias @ jw, axes=([0, 1], [0, 1]))
    return m


def _velocities_np(model, frames, qd):
    nb = len(model.links)
    omegas = np.empty((nb, 3))
    vels = np.empty((nb, 3))
    omegas[0] = qd[3:6]
    vels[0] = qd[0:3]
    parents = model.joint_parents
    for j in range(model.n_dof):
        par = parents[j]
        arm = frames.origins[j + 1] - frames.origins[par]
        omegas[j + 1] = omegas[par] + frames.axes[j] * qd[6 + j]
        vels[j + 1] = vels[par] + _cross(omegas[par], arm)
    return omegas, vels


def _bias_np(model, frames, qd, gravity, jv, jw):
    qd = value_of(qd)
    nb = len(model.links)
    omegas, _ = _velocities_np(model, frames, qd)
    alphas = np.zeros((nb, 3))
    accels = np.zeros((nb, 3))
    parents = model.joint_parents
    for j in range(model.n_dof):
        par = parents[j]
        arm = frames.origins[j + 1] - frames.origins[par]
        alphas[j + 1] = alphas[par] + _cross(omegas[par], frames.axes[j]) * qd[6 + j]
        accels[j + 1] = (
            accels[par]
            + _cross(alphas[par], arm)
            + _cross(omegas[par], _cross(omegas[par], arm))
        )
    arm_c = frames.coms - frames.origins
    acc_com = accels + _cross_rows(alphas, arm_c) + _cross_rows(omegas, _cross_rows(omegas, arm_c))
    forces = model.link_masses[:, None] * (acc_com - gravity)
    i_omega = (frames.inertias @ omegas[:, :, None]).squeeze(-1)
    torques = (frames.inertias @ alphas[:, :, None]).squeeze(-1) + _cross_rows(omegas, i_omega)
    return np.tensordot(jv, forces, axes=([0, 1], [0, 1])) + np.tensordot(jw, torques, axes=([0, 1], [0, 1]))


def _contact_jacobian_np(model, frames, jv, jw, active_links, points=None):
    blocks = []
    for idx, link in enumerate(active_links):
        point = frames.origins[link] if points is None else value_of(points[idx])
        # Shift the COM Jacobian to the contact point on the same body.
        jv_pt = jv[link] + bk.skew(frames.coms[link] - point) @ jw[link]
        blocks.append(jv_pt)
        blocks.append(jw[link])
    return np.concatenate(blocks, axis=0)


# -- public operations ----------------------------------------------------------


def mass_matrix(model: SkeletonModel, q):
    """Generalized inertia (n_v x n_v), symmetric positive definite."""
    if bk.is_tensor(q):
        return _mass_matrix_taped(model, _BodyFrames(model, q))
    frames = _FastFrames(model, q)
    jv, jw = _com_jacobians_np(model, frames)
    return _mass_matrix_np(model, frames, jv, jw)


def bias_forces(model: SkeletonModel, q, qd, gravity=GRAVITY_FLOOR):
    """Gravity plus velocity-product generalized forces h(q, q_dot).

    Sign convention: M qdd + h = tau_applied, so at rest h is minus the
    generalized gravity force and free fall gives qdd = -M^{-1} h = g.
    """
    gravity = value_of(gravity)
    if bk.is_tensor(q) or bk.is_tensor(qd):
        return _bias_taped(model, _BodyFrames(model, q), qd, gravity)
    frames = _FastFrames(model, q)
    jv, jw = _com_jacobians_np(model, frames)
    return _bias_np(model, frames, qd, gravity, jv, jw)


def kinetic_energy(model: SkeletonModel, q, qd):
    """Sum of per-link spatial kinetic energies (independent of M assembly)."""
    frames = _BodyFrames(model, q)
    omegas, vels = _body_velocities(model, frames, qd)
    total = 0.0
    for i, link in enumerate(model.links):
        arm = frames.coms[i] - frames.origins[i]
        v_com = vels[i] + bk.cross3(omegas[i], arm)
        total = total + 0.5 * link.mass * (v_com @ v_com) + 0.5 * (
            omegas[i] @ (frames.inertias[i] @ omegas[i])
        )
    return total


def contact_jacobian(model: SkeletonModel, q, active_links, points=None):
    """Stacked (6 n_c, n_v) map from q_dot to contact-frame spatial velocity.

    Rows per contact: linear velocity of the contact point (world frame),
    then the angular velocity of its link. ``points`` places each contact
    frame (world coordinates, attached to the link); default link origins.
    """
    if len(active_links) == 0:
        raise EmptyContacts("no contact links active")
    if bk.is_tensor(q):
        return _contact_jacobian_taped(model, _BodyFrames(model, q), active_links, points)
    frames = _FastFrames(model, q)
    jv, jw = _com_jacobians_np(model, frames)
    return _contact_jacobian_np(model, frames, jv, jw, active_links, points)


def grf_map(active_links, contact_offsets):
    """Block-diagonal (6 n_c, 3 n_c) map from contact forces to wrenches.

    Each 3-vector force f at lever arm r (from the contact frame origin,
    same frame as the Jacobian rows) becomes the wrench [f, r x f].
    """
    n_c = len(active_links)
    if n_c == 0:
        raise EmptyContacts("no contact links active")
    g = np.zeros((6 * n_c, 3 * n_c))
    for i in range(n_c):
        r = np.asarray(contact_offsets[i], dtype=np.float64)
        g[6 * i : 6 * i + 3, 3 * i : 3 * i + 3] = _EYE3
        g[6 * i + 3 : 6 * i + 6, 3 * i : 3 * i + 3] = bk.skew(r)
    return g


def compute_dynamics(
    model: SkeletonModel,
    q,
    qd,
    gravity=GRAVITY_FLOOR,
    active_links=(),
    contact_points=None,
) -> DynamicsQuantities:
    """Evaluate M, h and (when contacts are active) J, G in one FK pass.

    ``contact_points="sites"`` places one contact frame at each of the
    model's contact sites (active_links is then derived from the sites).
    """
    gravity = value_of(gravity)
    taped = bk.is_tensor(q) or bk.is_tensor(qd)
    use_sites = isinstance(contact_points, str) and contact_points == "sites"
    if use_sites:
        active_links = [s.link for s in model.contact_sites]
    n_c = len(active_links)
    if taped:
        frames = _BodyFrames(model, q)
        if use_sites:
            contact_points = [
                frames.origins[s.link] + frames.rots[s.link] @ s.offset
                for s in model.contact_sites
            ]
        jacs = _com_jacobians_taped(model, frames)
        mass = _mass_matrix_taped(model, frames, jacs)
        bias = _bias_taped(model, frames, qd, gravity, jacs)
        jac = _contact_jacobian_taped(model, frames, active_links, contact_points) if n_c else None
    else:
        frames = _FastFrames(model, q)
        if use_sites:
            contact_points = [
                frames.origins[s.link] + frames.rots[s.link] @ s.offset
                for s in model.contact_sites
            ]
        jv, jw = _com_jacobians_np(model, frames)
        mass = _mass_matrix_np(model, frames, jv, jw)
        bias = _bias_np(model, frames, qd, gravity, jv, jw)
        jac = _contact_jacobian_np(model, frames, jv, jw, active_links, contact_points) if n_c else None
    # Contact frames sit at the contact points themselves, so the force
    # lever arm inside each frame is zero.
    gmap = grf_map(active_links, [np.zeros(3)] * n_c) if n_c else None
    return DynamicsQuantities(
        mass=mass,
        bias=bias,
        contact_jac=jac,
        grf_to_wrench=gmap,
        n_contacts=n_c,
        active_links=tuple(active_links),
        contact_points=contact_points,
    )


def _condition_number(m_val: np.ndarray) -> float:
    eig = np.linalg.eigvalsh(m_val)
    smallest = eig[0]
    if smallest <= 0.0:
        return np.inf
    return float(eig[-1] / smallest)


def forward_dynamics(dq: DynamicsQuantities, tau, lam=None):
    """Accelerations from the equation of motion, via factorised solve.

    Follows the net-force form qdd = M^{-1}(tau* + J^T G lam - h) with
    tau* = tau - J^T G lam, which algebraically equals M^{-1}(tau - h); the
    contact force shapes the applied-torque split (and the force readout),
    not the resulting acceleration.
    """
    cond = _condition_number(value_of(dq.mass))
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularMass(f"mass matrix condition number {cond:.3e}")
    if dq.n_contacts and lam is not None:
        contact_force = bk.transpose(dq.contact_jac) @ (dq.grf_to_wrench @ lam)
        tau_star = tau - contact_force
        rhs = tau_star + contact_force - dq.bias
    else:
        rhs = tau - dq.bias
    try:
        return bk.solve_spd(dq.mass, rhs)
    except np.linalg.LinAlgError as e:
        raise SingularMass(str(e)) from None


def contact_split(dq: DynamicsQuantities, tau, lam):
    """The applied-torque split tau* = tau - J^T G lam, exposed for readout."""
    if dq.n_contacts == 0 or lam is None:
        return tau
    return tau - bk.transpose(dq.contact_jac) @ (dq.grf_to_wrench @ lam)


def integrate(model: SkeletonModel, q, qd, qdd, dt: float):
    """Semi-implicit step: velocity first, then position with the new velocity.

    Translation and joint angles advance additively; the root quaternion
    advances by the first-order orientation update and renormalisation.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    qd_new = qd + dt * qdd
    trans = q[0:3] + dt * qd_new[0:3]
    ori = quat_integrate(q[3:7], qd_new[3:6], dt)
    angles = q[7:] + dt * qd_new[6:]
    return bk.concat([trans, ori, angles]), qd_new
