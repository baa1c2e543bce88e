"""Per-frame physics refinement: gains, PD force, contact force, dynamics.

One frame of refinement runs the inner loop ``substeps`` times (default six)
at dt = frame_period / substeps:

    gains <- gain net            (pose error, state, mass diagonal)
    tau   <- PD rule             kp o e - kd o qd + alpha + h
    lam   <- contact force net   (site kinematics, root actuation, labels)
    qdd   <- forward dynamics
    qd'   <- velocity update, then hard non-penetration projection
    q'    <- position update with the projected velocity

State, torques and forces stay on the gradient tape when the inputs are
taped, so training losses reach every network through the whole loop. In
plain inference the network outputs are detached immediately, keeping the
state on the fast numpy path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backend as bk
from .backend import value_of
from .contact import FrictionCone, loss_cone, loss_force, loss_smooth
from .dynamics import DynamicsQuantities, compute_dynamics, forward_dynamics
from .networks import ContactForceNet, GainNet, GainOutput
from .projection import FloorModel, project_velocity
from .skeleton import SkeletonModel
from .spatial import quat_error, quat_integrate


@dataclass(frozen=True)
class ContactLabels:
    """Per-site contact probabilities and their thresholded binary states."""

    probs: np.ndarray  # (n_sites,) in [0, 1]
    threshold: float = 0.5

    def __post_init__(self):
        p = np.asarray(value_of(self.probs), dtype=np.float64).reshape(-1)
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ValueError(f"contact probabilities must lie in [0, 1], got {p}")
        object.__setattr__(self, "probs", p)

    @property
    def states(self) -> np.ndarray:
        return self.probs >= self.threshold

    @staticmethod
    def none(n_sites: int = 4) -> "ContactLabels":
        return ContactLabels(np.zeros(n_sites))

    @staticmethod
    def all(n_sites: int = 4) -> "ContactLabels":
        return ContactLabels(np.ones(n_sites))


@dataclass
class CycleConfig:
    substeps: int = 6
    gamma: float = 10.0
    contact_threshold: float = 0.5
    networks_per_substep: bool = True  # False: evaluate nets once per frame
    distance_activation: bool = False  # activate contacts by height, not labels
    activation_distance: float = 0.01
    margin: float = 0.0
    # "critical": kd = kd_scale * sqrt(kp * diag(M)) (per-DoF critical damping);
    # "sqrt":     kd = kd_scale * sqrt(kp). The literal sqrt rule is unstable for
    # light distal joints at dt = frame_period / substeps, so critical is default.
    kd_mode: str = "critical"
    kd_scale: float = 2.0
    kd_override: np.ndarray = None
    # Gain-term integration:
    #   "stable_pd":  solve (M + dt D + dt^2 K) qd' = M qd + dt (kp o e + alpha);
    #                 both PD terms implicit, unconditionally stable, tight
    #                 tracking at high bandwidth (default);
    #   "implicit_kd": damping implicit, stiffness explicit;
    #   "explicit":    the literal finite-difference velocity update.
    # All three agree in the dt -> 0 limit and share the same recorded tau.
    integration: str = "stable_pd"
    mu: float = 0.8


@dataclass
class CycleState:
    """Simulation state carried between frames of one sequence."""

    q: object  # (n_q,)
    qd: object  # (n_v,)
    lam_pre: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    lam_pre_sites: tuple = ()
    frame_index: int = 0


@dataclass
class StepRecord:
    """Everything one inner step produced, for losses and export."""

    tau: object
    tau_star_root: object
    lam_floor: object  # (3 n_c,) or None
    active_sites: tuple
    root_residual: float
    grf_loss: object = None
    normal_velocities: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gains: GainOutput = None
    # detached copies for force-net replays (the trajectory does not depend
    # on the contact force, so these stay valid while that net trains)
    grf_features: np.ndarray = None
    j1_t: np.ndarray = None
    g_active: np.ndarray = None


@dataclass
class FrameTrace:
    records: list
    lam_full: np.ndarray  # (n_sites, 3), floor frame, zeros where inactive
    tau_final: np.ndarray  # (n_v,)
    root_residual: float
    active_sites: tuple


def pose_error(q_hat, q0):
    """Mixed-metric difference: entrywise except the root-orientation block,
    which is the rotation-vector error between the two quaternions."""
    return bk.concat(
        [
            q_hat[0:3] - q0[0:3],
            quat_error(q_hat[3:7], q0[3:7]),
            q_hat[7:] - q0[7:],
        ]
    )


def pd_force(gains: GainOutput, kd, e_pd, qd0, h):
    """PD rule with offset force and bias compensation."""
    return gains.kp * e_pd - kd * qd0 + gains.alpha + h


def default_kp_ini(model: SkeletonModel, root_bandwidth: float = 10.0, joint_bandwidth: float = 12.0) -> np.ndarray:
    """Baseline per-DoF gains scaled by the rest-pose inertia diagonal.

    kp_i = w^2 * M_ii(rest) gives every DoF the same tracking bandwidth w
    (rad/s) regardless of how light or heavy its subtree is, which keeps the
    explicit inner integration far from its stability limit. Shipped as a
    tunable baseline; the gain net modulates within (0, 2 kp_ini).
    """
    from .dynamics import mass_matrix

    q_rest = np.zeros(model.n_q)
    q_rest[3] = 1.0
    diag = np.diag(mass_matrix(model, q_rest)).copy()
    kp = joint_bandwidth**2 * diag
    kp[0:6] = root_bandwidth**2 * diag[0:6]
    return kp


def _detach_inference(x):
    """Drop to plain numpy outside of gradient mode."""
    if x is None or not isinstance(x, ad.Tensor):
        return x
    if ad.grad_enabled() and x.requires_grad:
        return x
    return x.numpy()


class DynamicCycle:
    """Runs the inner refinement loop for one character and network pair."""

    def __init__(
        self,
        model: SkeletonModel,
        gain_net: GainNet,
        force_net: ContactForceNet,
        floor: FloorModel,
        config: CycleConfig = None,
        kp_ini: np.ndarray = None,
    ):
        self.model = model
        self.gain_net = gain_net
        self.force_net = force_net
        self.floor = floor
        self.config = config or CycleConfig()
        self.kp_ini = default_kp_ini(model) if kp_ini is None else np.asarray(kp_ini, dtype=np.float64)
        self.gravity = floor.gravity_camera()
        self.cone = FrictionCone(mu=self.config.mu)
        self.site_links = [s.link for s in model.contact_sites]
        self.n_sites = len(self.site_links)

    # -- feature assembly ----------------------------------------------------

    def kd_for(self, gains: GainOutput, mass_diag):
        if self.config.kd_override is not None:
            return np.asarray(self.config.kd_override, dtype=np.float64)
        if self.config.kd_mode == "sqrt":
            return self.config.kd_scale * bk.sqrt(gains.kp)
        return self.config.kd_scale * bk.sqrt(gains.kp * mass_diag)

    def gain_features(self, q_hat, q0, qd0, mass_diag, e_pd):
        return bk.concat([q_hat, q0, qd0, mass_diag, e_pd])

    def grf_features(self, site_pos_floor, site_vel_floor, tau_root, labels):
        return bk.concat([site_pos_floor, site_vel_floor, tau_root, labels.probs])

    def active_sites(self, labels: ContactLabels, site_heights) -> tuple:
        if self.config.distance_activation:
            return tuple(
                i for i, h in enumerate(site_heights) if h <= self.config.activation_distance
            )
        return tuple(int(i) for i in np.flatnonzero(labels.states))

    # -- one inner step -------------------------------------------------------

    def cycle_step(self, state: CycleState, q_hat, labels: ContactLabels, dt: float, reuse=None):
        """Advance the state by one inner step; returns (state, StepRecord).

        ``reuse`` carries (gains, lam) evaluated once per frame when the
        networks are not run per substep.
        """
        cfg = self.config
        q0, qd0 = state.q, state.qd
        dq = compute_dynamics(
            self.model,
            q0,
            qd0,
            gravity=self.gravity,
            contact_points="sites",
        )
        rot_cf = self.floor.rotation()
        site_pos_floor = bk.concat([self.floor.transform.apply(p) for p in dq.contact_points])
        spatial_vel = dq.contact_jac @ qd0
        site_vel_floor = bk.concat(
            [rot_cf @ spatial_vel[6 * i : 6 * i + 3] for i in range(self.n_sites)]
        )
        heights = value_of(site_pos_floor).reshape(-1, 3)[:, self.floor.normal_axis]
        active = self.active_sites(labels, heights)

        e_pd = pose_error(q_hat, q0)
        mass_diag = _diagonal(dq.mass)
        if reuse is not None and reuse.get("gains") is not None:
            gains = reuse["gains"]
        else:
            feats = self.gain_features(q_hat, q0, qd0, mass_diag, e_pd)
            gains = self.gain_net(feats, self.kp_ini, cfg.gamma)
            gains = GainOutput(
                kp=_detach_inference(gains.kp),
                alpha=_detach_inference(gains.alpha),
                s_g=_detach_inference(gains.s_g),
                s_f=_detach_inference(gains.s_f),
            )
        kd = self.kd_for(gains, mass_diag)
        tau = pd_force(gains, kd, e_pd, qd0, dq.bias)

        lam_floor = None
        lam_cam = None
        grf_loss = None
        grf_feature_values = None
        tau_star_root = tau[0:6]
        if active:
            if reuse is not None and reuse.get("lam_floor") is not None:
                lam_floor = reuse["lam_floor"]
            else:
                feats_grf = self.grf_features(site_pos_floor, site_vel_floor, tau[0:6], labels)
                grf_feature_values = value_of(feats_grf).copy()
                lam_floor = _detach_inference(self.force_net(feats_grf, active))
            rows = _contact_rows(active)
            cols = _force_cols(active)
            lam_cam = _rotate_stacked(lam_floor, rot_cf.T, len(active))
            j_active = dq.contact_jac[rows]
            g_active = dq.grf_to_wrench[np.ix_(rows, cols)]
            j1_t = bk.transpose(j_active[:, 0:6])
            grf_loss = self._grf_loss_terms(tau, j1_t, g_active, lam_cam, lam_floor, state, active)
            dq_active = DynamicsQuantities(
                mass=dq.mass,
                bias=dq.bias,
                contact_jac=j_active,
                grf_to_wrench=g_active,
                n_contacts=len(active),
                active_links=tuple(active),
            )
            qdd = forward_dynamics(dq_active, tau, lam_cam)
            tau_star_root = tau[0:6] - j1_t @ (g_active @ lam_cam)
        else:
            qdd = forward_dynamics(dq, tau, None)

        if cfg.integration == "stable_pd":
            eye = np.eye(self.model.n_v)
            lhs = dq.mass + (dt * eye) * kd + (dt * dt * eye) * gains.kp
            rhs = dq.mass @ qd0 + dt * (gains.kp * e_pd + gains.alpha)
            qd_raw = bk.solve_spd(lhs, rhs)
        elif cfg.integration == "implicit_kd":
            damp = np.eye(self.model.n_v) * kd
            qd_raw = qd0 + dt * bk.solve_spd(dq.mass + dt * damp, dq.mass @ qdd)
        else:
            qd_raw = qd0 + dt * qdd
        proj = project_velocity(
            qd_raw, dq.contact_jac, self.floor, active_contacts=list(active), margin=cfg.margin
        )
        qd_new = proj.qd_star
        q_new = _position_update(q0, qd_new, dt)

        record = StepRecord(
            tau=tau,
            tau_star_root=tau_star_root,
            lam_floor=lam_floor,
            active_sites=active,
            root_residual=float(np.linalg.norm(value_of(tau_star_root)) / self.model.total_mass),
            grf_loss=grf_loss,
            normal_velocities=proj.normal_velocities,
            gains=gains,
            grf_features=grf_feature_values,
            j1_t=value_of(j1_t).copy() if active else None,
            g_active=value_of(g_active).copy() if active else None,
        )
        new_state = CycleState(
            q=q_new,
            qd=qd_new,
            lam_pre=value_of(lam_floor).reshape(-1, 3).copy() if lam_floor is not None else np.zeros((0, 3)),
            lam_pre_sites=active,
            frame_index=state.frame_index,
        )
        return new_state, record

    def _grf_loss_terms(self, tau, j1_t, g_active, lam_cam, lam_floor, state, active):
        force_term = loss_force(tau[0:6], j1_t, g_active, lam_cam)
        cone_term = loss_cone(lam_floor, self.cone)
        # Smoothness compares only the contacts persisting from the previous step.
        persist = [i for i, s in enumerate(active) if s in state.lam_pre_sites]
        if persist and state.lam_pre.size:
            pre = np.concatenate(
                [state.lam_pre[list(state.lam_pre_sites).index(active[i])] for i in persist]
            )
            parts = [lam_floor[3 * i : 3 * i + 3] for i in persist]
            cur = bk.concat(parts) if len(parts) > 1 else parts[0]
            smooth_term = loss_smooth(cur, pre)
        else:
            smooth_term = 0.0
        return force_term + smooth_term + cone_term

    # -- one frame ------------------------------------------------------------

    def refine_frame(self, state: CycleState, q_hat, labels: ContactLabels, frame_period: float):
        """Iterate the inner step ``substeps`` times; returns (state, FrameTrace)."""
        if frame_period <= 0.0:
            raise ValueError(f"frame period must be positive, got {frame_period}")
        cfg = self.config
        dt = frame_period / cfg.substeps
        reuse = None
        records = []
        for i in range(cfg.substeps):
            state, record = self.cycle_step(state, q_hat, labels, dt, reuse=reuse)
            records.append(record)
            if not cfg.networks_per_substep and i == 0:
                reuse = {"gains": record.gains, "lam_floor": record.lam_floor}
        state.frame_index += 1
        last = records[-1]
        lam_full = np.zeros((self.n_sites, 3))
        if last.lam_floor is not None:
            vals = value_of(last.lam_floor).reshape(-1, 3)
            for i, site in enumerate(last.active_sites):
                lam_full[site] = vals[i]
        trace = FrameTrace(
            records=records,
            lam_full=lam_full,
            tau_final=value_of(last.tau).copy(),
            root_residual=last.root_residual,
            active_sites=last.active_sites,
        )
        return state, trace


def _diagonal(mass):
    n = value_of(mass).shape[0]
    idx = (np.arange(n), np.arange(n))
    return mass[idx]


def _position_update(q, qd_new, dt):
    trans = q[0:3] + dt * qd_new[0:3]
    ori = quat_integrate(q[3:7], qd_new[3:6], dt)
    angles = q[7:] + dt * qd_new[6:]
    return bk.concat([trans, ori, angles])


def _contact_rows(active) -> list:
    rows = []
    for site in active:
        rows.extend(range(6 * site, 6 * site + 6))
    return rows


def _force_cols(active) -> list:
    cols = []
    for site in active:
        cols.extend(range(3 * site, 3 * site + 3))
    return cols


def _rotate_stacked(lam_floor, rot, n_c):
    """Rotate stacked per-contact 3-vectors with one block-diagonal matrix."""
    block = np.zeros((3 * n_c, 3 * n_c))
    for i in range(n_c):
        block[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = rot
    return block @ lam_floor
