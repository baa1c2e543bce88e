"""Friction-cone geometry and the ground-reaction-force training losses.

Contact forces live in the floor frame, where the normal component is a
single coordinate. The cone test is lambda_n > 0 with tangential magnitude
at most mu * lambda_n; the cone loss penalises the squared angular excursion
beyond the cone's half-angle arctan(mu).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import backend as bk
from .backend import value_of

_ANGLE_EPS = 1e-12


@dataclass(frozen=True)
class FrictionCone:
    """Coulomb cone around the floor normal with coefficient mu."""

    mu: float = 0.8
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    theta_max: float = field(init=False)

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"cone normal must be unit length, got |n| = {norm}")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "theta_max", math.atan(self.mu))


@dataclass(frozen=True)
class GroundReactionForce:
    """Per-contact 3-vector forces (floor frame) attached to link ids."""

    forces: np.ndarray  # (n_c, 3)
    links: tuple

    def __post_init__(self):
        f = np.asarray(self.forces, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(f)):
            raise ValueError("contact forces must be finite")
        if f.shape[0] != len(self.links):
            raise ValueError(f"{f.shape[0]} forces for {len(self.links)} links")
        object.__setattr__(self, "forces", f)

    def flat(self) -> np.ndarray:
        return self.forces.reshape(-1)


def cone_check(lam, cone: FrictionCone):
    """(inside, theta): cone membership and the angle from the normal."""
    lam = value_of(lam).reshape(3)
    lam_n = float(lam @ cone.normal)
    lam_t = lam - lam_n * cone.normal
    norm = np.linalg.norm(lam)
    if norm < _ANGLE_EPS:
        return False, 0.0
    theta = float(np.arctan2(np.linalg.norm(lam_t), lam_n))
    inside = lam_n > 0.0 and np.linalg.norm(lam_t) <= cone.mu * lam_n + 1e-12
    return inside, theta


def _angles_from_normal(lam_stacked, cone: FrictionCone):
    """Angle between each contact force and the cone normal, taped-safe.

    A vanishing force has no direction to penalise and contributes no angle.
    """
    n_c = value_of(lam_stacked).size // 3
    lam = bk.reshape(lam_stacked, (n_c, 3))
    angles = []
    for i in range(n_c):
        f = lam[i]
        if np.linalg.norm(value_of(f)) < 1e-9:
            continue
        norm = bk.norm(f, eps=_ANGLE_EPS)
        cosang = (f @ cone.normal) / norm
        cv = float(value_of(cosang))
        if cv >= 1.0 - 1e-12:
            angles.append(cosang * 0.0)
        elif cv <= -1.0 + 1e-12:
            angles.append(cosang * 0.0 + math.pi)
        else:
            angles.append(bk.arccos(cosang))
    return angles


def loss_cone(lam, cone: FrictionCone):
    """Sum of squared cone-angle excursions; zero inside the cone."""
    angles = _angles_from_normal(lam, cone)
    total = None
    for theta in angles:
        if float(value_of(theta)) > cone.theta_max:
            term = theta * theta
            total = term if total is None else total + term
    if total is None:
        # keep the tape connected (with zero gradient) when nothing is outside
        return lam[0] * 0.0 if bk.is_tensor(lam) else 0.0
    return total


def loss_force(tau_root, j1_t, grf_to_wrench, lam):
    """Squared mismatch between root actuation and the contact explanation.

    j1_t is the (6, 6 n_c) root block of the transposed contact Jacobian.
    """
    resid = tau_root - j1_t @ (grf_to_wrench @ lam)
    return resid @ resid


def loss_smooth(lam, lam_pre):
    """Squared step between consecutive contact-force estimates."""
    d = lam - lam_pre
    return d @ d


def match_contacts(lam, links, lam_pre, links_pre):
    """Restrict two force vectors to the contacts present in both frames."""
    lam = value_of(lam).reshape(-1, 3)
    lam_pre = value_of(lam_pre).reshape(-1, 3)
    common = [l for l in links if l in links_pre]
    if not common:
        return np.zeros(0), np.zeros(0)
    cur = np.concatenate([lam[list(links).index(l)] for l in common])
    pre = np.concatenate([lam_pre[list(links_pre).index(l)] for l in common])
    return cur, pre


def loss_grf(tau_root, j1_t, grf_to_wrench, lam, lam_pre, cone: FrictionCone):
    """Force-explanation + temporal smoothness + cone terms, unit weights."""
    return (
        loss_force(tau_root, j1_t, grf_to_wrench, lam)
        + loss_smooth(lam, lam_pre)
        + loss_cone(lam, cone)
    )


def root_residual(tau, j1_t, grf_to_wrench, lam, body_weight: float):
    """Norm of the unexplained root actuation, per kilogram of body mass."""
    tau_root = tau[0:6]
    if lam is None or value_of(lam).size == 0:
        resid = tau_root
    else:
        resid = tau_root - j1_t @ (grf_to_wrench @ lam)
    resid = value_of(resid)
    return float(np.linalg.norm(resid) / body_weight)
