"""Kinematic tree of the floating-base character: types, file format, FK.

The skeleton is a root link plus a chain of single-axis revolute joints, each
of which owns the link it moves. Multi-axis anatomical joints appear as
chains of single-axis ones in a fixed X-Y-Z order, so the pose vector is
root translation (3) + root quaternion (4) + one angle per revolute DoF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import backend as bk
from .backend import value_of
from .spatial import UnitQuaternion, AngularVelocity, axis_rotation_matrix, quat_normalize, quat_to_matrix

CONTACT_SITE_NAMES = ("left_toe", "left_heel", "right_toe", "right_heel")
HUMANOID_DOFS = 40


class SkeletonFileError(ValueError):
    """Skeleton definition file violates the schema; carries a line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class LinkInertial:
    """Mass properties in the link's own frame (origin at its joint)."""

    mass: float
    com: np.ndarray
    inertia: np.ndarray

    def validate(self, where: str = "link"):
        if not self.mass > 0.0:
            raise ValueError(f"{where}: mass must be positive, got {self.mass}")
        inertia = np.asarray(self.inertia)
        if inertia.shape != (3, 3) or not np.allclose(inertia, inertia.T, atol=1e-12):
            raise ValueError(f"{where}: inertia must be a symmetric 3x3 tensor")
        eig = np.linalg.eigvalsh(inertia)
        if np.any(eig <= 0.0):
            raise ValueError(f"{where}: inertia must be positive definite, eigenvalues {eig}")
        # principal-moment triangle inequalities
        if eig[2] > eig[0] + eig[1] + 1e-12:
            raise ValueError(f"{where}: inertia violates the triangle inequality, eigenvalues {eig}")


@dataclass(frozen=True)
class JointSpec:
    """Single-axis revolute DoF; moves the link of the same index + 1."""

    name: str
    parent: int
    axis: np.ndarray
    offset: np.ndarray
    limit_lo: float
    limit_hi: float


@dataclass(frozen=True)
class SitePoint:
    name: str
    link: int
    offset: np.ndarray


@dataclass
class SkeletonModel:
    """Immutable-after-load kinematic tree with inertials and named points."""

    name: str
    links: list  # LinkInertial per link; index 0 is the root
    link_names: list
    joints: list  # JointSpec per DoF; joint j moves link j + 1
    contact_sites: list  # SitePoint, order = CONTACT_SITE_NAMES for humanoids
    keypoints: list  # SitePoint, order = 2D keypoint order
    limits_lo: np.ndarray = field(init=False)
    limits_hi: np.ndarray = field(init=False)
    path_dofs: list = field(init=False)  # per link: DoF indices from root

    def __post_init__(self):
        n_dof = len(self.joints)
        if len(self.links) != n_dof + 1:
            raise ValueError(f"{n_dof} joints need {n_dof + 1} links, got {len(self.links)}")
        for i, link in enumerate(self.links):
            link.validate(where=f"link {self.link_names[i]}")
        for j, joint in enumerate(self.joints):
            if not 0 <= joint.parent <= j:
                raise ValueError(f"joint {joint.name}: parent index {joint.parent} breaks tree order")
            if not joint.limit_lo < joint.limit_hi:
                raise ValueError(f"joint {joint.name}: limits [{joint.limit_lo}, {joint.limit_hi}] are not ordered")
            n = np.linalg.norm(joint.axis)
            if abs(n - 1.0) > 1e-9:
                raise ValueError(f"joint {joint.name}: axis must be unit length")
        self.limits_lo = np.array([j.limit_lo for j in self.joints])
        self.limits_hi = np.array([j.limit_hi for j in self.joints])
        paths = [[]]
        for j, joint in enumerate(self.joints):
            paths.append(paths[joint.parent] + [j])
        self.path_dofs = paths
        self._build_fast_tables()

    def _build_fast_tables(self):
        """Stacked per-joint/link arrays for the vectorised dynamics path."""
        n_dof = len(self.joints)
        self.joint_parents = np.array([j.parent for j in self.joints], dtype=np.intp)
        self.joint_axes = np.stack([j.axis for j in self.joints]) if n_dof else np.zeros((0, 3))
        self.joint_offsets = np.stack([j.offset for j in self.joints]) if n_dof else np.zeros((0, 3))
        ax = self.joint_axes
        self.axis_skews = np.zeros((n_dof, 3, 3))
        self.axis_skews[:, 0, 1] = -ax[:, 2]
        self.axis_skews[:, 0, 2] = ax[:, 1]
        self.axis_skews[:, 1, 0] = ax[:, 2]
        self.axis_skews[:, 1, 2] = -ax[:, 0]
        self.axis_skews[:, 2, 0] = -ax[:, 1]
        self.axis_skews[:, 2, 1] = ax[:, 0]
        self.axis_outers = np.einsum("ji,jk->jik", ax, ax)
        self.link_masses = np.array([l.mass for l in self.links])
        self.link_coms = np.stack([l.com for l in self.links])
        self.link_inertias = np.stack([l.inertia for l in self.links])
        pair_links, pair_dofs = [], []
        for b, path in enumerate(self.path_dofs):
            for k in path:
                pair_links.append(b)
                pair_dofs.append(k)
        self.jac_pair_links = np.array(pair_links, dtype=np.intp)
        self.jac_pair_dofs = np.array(pair_dofs, dtype=np.intp)
        # per-link scatter maps: compact Jacobian columns -> full column layout
        n_v = 6 + n_dof
        self.jac_scatter = []
        for path in self.path_dofs:
            s = np.zeros((6 + len(path), n_v))
            s[0:3, 0:3] = np.eye(3)
            s[3:6, 3:6] = np.eye(3)
            for row, k in enumerate(path):
                s[6 + row, 6 + k] = 1.0
            self.jac_scatter.append(s)

    @property
    def n_dof(self) -> int:
        return len(self.joints)

    @property
    def n_q(self) -> int:
        return 7 + self.n_dof

    @property
    def n_v(self) -> int:
        return 6 + self.n_dof

    @property
    def total_mass(self) -> float:
        return float(sum(link.mass for link in self.links))

    def require_humanoid(self):
        if self.n_dof != HUMANOID_DOFS:
            raise ValueError(f"expected {HUMANOID_DOFS} revolute DoFs, model has {self.n_dof}")
        names = tuple(s.name for s in self.contact_sites)
        if names != CONTACT_SITE_NAMES:
            raise ValueError(f"expected contact sites {CONTACT_SITE_NAMES}, got {names}")

    def link_index(self, name: str) -> int:
        return self.link_names.index(name)

    def joint_index(self, name: str) -> int:
        for j, joint in enumerate(self.joints):
            if joint.name == name:
                return j
        raise KeyError(name)

    def contact_site_links(self) -> list:
        return [s.link for s in self.contact_sites]


@dataclass(frozen=True)
class PoseVector:
    """Generalized position: camera-frame translation, root quaternion, angles."""

    trans: np.ndarray
    ori: UnitQuaternion
    angles: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.trans, dtype=np.float64), self.ori.to_array(), np.asarray(self.angles, dtype=np.float64)])

    @staticmethod
    def from_array(q) -> "PoseVector":
        q = np.asarray(value_of(q), dtype=np.float64)
        return PoseVector(q[0:3].copy(), UnitQuaternion.from_array(q[3:7]), q[7:].copy())


@dataclass(frozen=True)
class VelocityVector:
    """Generalized velocity: linear, angular (camera frame), joint rates."""

    lin: np.ndarray
    ang: AngularVelocity
    joint_rates: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.lin, dtype=np.float64), self.ang.to_array(), np.asarray(self.joint_rates, dtype=np.float64)])

    @staticmethod
    def from_array(v) -> "VelocityVector":
        v = np.asarray(value_of(v), dtype=np.float64)
        return VelocityVector(v[0:3].copy(), AngularVelocity(*v[3:6]), v[6:].copy())


# -- forward kinematics ---------------------------------------------------------


def link_frames(model: SkeletonModel, q):
    """World rotation and origin of every link at generalized position q.

    q is a (7 + n_dof,) array or tensor; gradients flow through when taped.
    """
    rots = [quat_to_matrix(quat_normalize(q[3:7]))]
    origins = [q[0:3]]
    for j, joint in enumerate(model.joints):
        r_par = rots[joint.parent]
        rots.append(r_par @ axis_rotation_matrix(joint.axis, q[7 + j]))
        origins.append(origins[joint.parent] + r_par @ joint.offset)
    return rots, origins


def point_position(rots, origins, site: SitePoint):
    if site.offset is None or not np.any(site.offset):
        return origins[site.link]
    return origins[site.link] + rots[site.link] @ site.offset


def forward_kinematics(model: SkeletonModel, q):
    """Camera-frame 3D positions of the model keypoints, stacked (M, 3)."""
    rots, origins = link_frames(model, q)
    return bk.stack([point_position(rots, origins, kp) for kp in model.keypoints])


def contact_site_positions(model: SkeletonModel, q):
    """Camera-frame positions of the foot contact sites, stacked (4, 3)."""
    rots, origins = link_frames(model, q)
    return bk.stack([point_position(rots, origins, s) for s in model.contact_sites])


def joint_limit_penalty(model: SkeletonModel, angles):
    """Sum of squared excursions outside [lo, hi]; zero inside, C1 at the edges."""
    over = bk.relu(angles - model.limits_hi)
    under = bk.relu(model.limits_lo - angles)
    return bk.tsum(over * over) + bk.tsum(under * under)


# -- skeleton file format ---------------------------------------------------------

_BLOCK_KINDS = ("link", "joint", "site", "keypoint")


def _parse_floats(value: str, count: int, line: int, key: str):
    parts = value.split()
    if len(parts) != count:
        raise SkeletonFileError(line, f"{key} expects {count} numbers, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as e:
        raise SkeletonFileError(line, f"{key}: {e}") from None


def _inertia_from_six(values):
    ixx, iyy, izz, ixy, ixz, iyz = values
    return np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])


def parse_skeleton(text: str, require_humanoid: bool = True) -> SkeletonModel:
    """Parse the key-value skeleton schema; errors carry line numbers.

    Schema: a ``skeleton NAME`` line, one root ``link`` block, then ``joint``
    blocks in DoF order (each owning its child link's mass properties), and
    ``site``/``keypoint`` blocks referring to links by name.
    """
    name = None
    blocks = []  # (kind, name, line, {key: (value, line)})
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split(None, 1)
        word = fields[0]
        rest = fields[1].strip() if len(fields) > 1 else ""
        if word == "skeleton":
            if name is not None:
                raise SkeletonFileError(lineno, "duplicate skeleton line")
            if not rest:
                raise SkeletonFileError(lineno, "skeleton line needs a name")
            name = rest
        elif word in _BLOCK_KINDS:
            if not rest:
                raise SkeletonFileError(lineno, f"{word} block needs a name")
            current = (word, rest, lineno, {})
            blocks.append(current)
        else:
            if current is None:
                raise SkeletonFileError(lineno, f"key {word!r} outside any block")
            if word in current[3]:
                raise SkeletonFileError(lineno, f"duplicate key {word!r} in {current[0]} {current[1]}")
            current[3][word] = (rest, lineno)
    if name is None:
        raise SkeletonFileError(1, "missing skeleton line")

    def need(block, key, count=None):
        kind, bname, bline, keys = block
        if key not in keys:
            raise SkeletonFileError(bline, f"{kind} {bname}: missing key {key!r}")
        value, kline = keys[key]
        if count is None:
            return value, kline
        return _parse_floats(value, count, kline, key), kline

    links, link_names, joints = [], [], []
    sites, keypoints = [], []
    link_lookup = {}

    def parse_inertial(block):
        kind, bname, bline, _ = block
        (mass,), _ = need(block, "mass", 1)
        com, _ = need(block, "com", 3)
        inertia6, kline = need(block, "inertia", 6)
        inertial = LinkInertial(mass, np.array(com), _inertia_from_six(inertia6))
        try:
            inertial.validate(where=f"{kind} {bname}")
        except ValueError as e:
            raise SkeletonFileError(kline, str(e)) from None
        return inertial

    def resolve_link(block, key="parent"):
        _, bname, _, _ = block
        value, kline = need(block, key)
        if value not in link_lookup:
            raise SkeletonFileError(kline, f"{bname}: unknown link {value!r}")
        return link_lookup[value]

    for block in blocks:
        kind, bname, bline, keys = block
        if kind == "link":
            if links:
                raise SkeletonFileError(bline, "only the root may be declared as a bare link")
            links.append(parse_inertial(block))
            link_names.append(bname)
            link_lookup[bname] = 0
        elif kind == "joint":
            if not links:
                raise SkeletonFileError(bline, "joint declared before the root link")
            if bname in link_lookup:
                raise SkeletonFileError(bline, f"duplicate link/joint name {bname!r}")
            parent = resolve_link(block, key="parent")
            axis, aline = need(block, "axis", 3)
            axis = np.array(axis)
            n = np.linalg.norm(axis)
            if n < 1e-12:
                raise SkeletonFileError(aline, f"joint {bname}: axis must be nonzero")
            axis = axis / n
            offset, _ = need(block, "offset", 3)
            limits, lline = need(block, "limits", 2)
            if not limits[0] < limits[1]:
                raise SkeletonFileError(lline, f"joint {bname}: limits must satisfy lo < hi")
            joints.append(JointSpec(bname, parent, axis, np.array(offset), limits[0], limits[1]))
            links.append(parse_inertial(block))
            link_names.append(bname)
            link_lookup[bname] = len(links) - 1
        elif kind == "site":
            link = resolve_link(block)
            offset, _ = need(block, "offset", 3)
            sites.append(SitePoint(bname, link, np.array(offset)))
        elif kind == "keypoint":
            link = resolve_link(block)
            offset, _ = need(block, "offset", 3)
            keypoints.append(SitePoint(bname, link, np.array(offset)))

    try:
        model = SkeletonModel(name, links, link_names, joints, sites, keypoints)
    except ValueError as e:
        raise SkeletonFileError(1, str(e)) from None
    if require_humanoid:
        try:
            model.require_humanoid()
        except ValueError as e:
            raise SkeletonFileError(1, str(e)) from None
    return model


def load_skeleton(path=None, require_humanoid: bool = True) -> SkeletonModel:
    """Load a skeleton file; with no path, the bundled 46-DoF humanoid."""
    if path is None:
        text = resources.files("physrefine.data").joinpath("humanoid46.skel").read_text()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    return parse_skeleton(text, require_humanoid=require_humanoid)
