"""Line-delimited structured text formats: keypoints in, motion and forces out.

Every format opens with a versioned magic line and is written with 17
significant digits, so float64 values survive a write/read round trip
bit-exactly and files stay human-diffable.
"""

from __future__ import annotations

import json

import numpy as np

from .camera import Keypoints2D

KEYPOINT_MAGIC = "physrefine-keypoints"
MOTION_MAGIC = "physrefine-motion"
FORMAT_VERSION = 1

FORCE_SITE_NAMES = ("left_toe", "left_heel", "right_toe", "right_heel")


class BadKeypointFile(ValueError):
    """Keypoint input file violates the schema."""


class BadMotionFile(ValueError):
    """Motion file violates the schema."""


def _fmt(values) -> str:
    return " ".join(f"{v:.17g}" for v in np.asarray(values, dtype=np.float64).reshape(-1))


# -- keypoint input ---------------------------------------------------------------


def write_keypoints(path, timestamps, frames):
    """One record per frame: timestamp then u, v, confidence per joint."""
    frames = list(frames)
    n_joints = frames[0].pixels.shape[0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{KEYPOINT_MAGIC} v{FORMAT_VERSION}\n")
        fh.write(f"joints {n_joints}\n")
        for t, kp in zip(timestamps, frames):
            conf = kp.confidence if kp.confidence is not None else np.ones(n_joints)
            row = np.column_stack([kp.pixels, conf]).reshape(-1)
            fh.write(f"{t:.17g} {_fmt(row)}\n")


def read_keypoints(path):
    """Returns (timestamps, [Keypoints2D]); raises BadKeypointFile."""
    timestamps = []
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != f"{KEYPOINT_MAGIC} v{FORMAT_VERSION}":
            raise BadKeypointFile(f"{path}: bad header {header!r}")
        joints_line = fh.readline().split()
        if len(joints_line) != 2 or joints_line[0] != "joints":
            raise BadKeypointFile(f"{path}: missing joints line")
        n_joints = int(joints_line[1])
        expected = 1 + 3 * n_joints
        for lineno, line in enumerate(fh, start=3):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != expected:
                raise BadKeypointFile(
                    f"{path}:{lineno}: expected {expected} fields, got {len(parts)}"
                )
            vals = np.array([float(p) for p in parts])
            t = vals[0]
            if timestamps and t <= timestamps[-1]:
                raise BadKeypointFile(f"{path}:{lineno}: timestamps must increase")
            rec = vals[1:].reshape(n_joints, 3)
            timestamps.append(t)
            frames.append(Keypoints2D(rec[:, 0:2].copy(), rec[:, 2].copy()))
    if not frames:
        raise BadKeypointFile(f"{path}: no frames")
    return np.array(timestamps), frames


# -- motion output ----------------------------------------------------------------


def write_motion(path, sequence):
    """Serialise a refined MotionSequence; schema documented in the header."""
    frames = sequence.frames
    n_q = frames[0].q.shape[0]
    n_v = frames[0].qd.shape[0]
    n_sites = frames[0].lam.shape[0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{MOTION_MAGIC} v{FORMAT_VERSION}\n")
        fh.write(f"layout t q[{n_q}] qd[{n_v}] tau[{n_v}] contacts[{n_sites}] lambda[{3 * n_sites}] root_residual\n")
        for f in frames:
            row = np.concatenate(
                [
                    [f.timestamp],
                    f.q,
                    f.qd,
                    f.tau,
                    f.contacts,
                    f.lam.reshape(-1),
                    [f.root_residual],
                ]
            )
            fh.write(_fmt(row) + "\n")


def read_motion(path):
    """Parse a motion file back into plain arrays (dict of stacked fields)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != f"{MOTION_MAGIC} v{FORMAT_VERSION}":
            raise BadMotionFile(f"{path}: bad header {header!r}")
        layout = fh.readline().strip()
        if not layout.startswith("layout "):
            raise BadMotionFile(f"{path}: missing layout line")
        import re

        dims = [int(d) for d in re.findall(r"\[(\d+)\]", layout)]
        n_q, n_v, _, n_sites, n_lam = dims
        rows = []
        for line in fh:
            line = line.strip()
            if line:
                rows.append(np.array([float(v) for v in line.split()]))
    data = np.stack(rows)
    out = {}
    col = 0
    out["t"] = data[:, col]
    col += 1
    for name, width in (("q", n_q), ("qd", n_v), ("tau", n_v), ("contacts", n_sites), ("lam", n_lam)):
        out[name] = data[:, col : col + width]
        col += width
    out["root_residual"] = data[:, col]
    return out


# -- force trace CSV --------------------------------------------------------------


def write_force_csv(path, sequence, joint_names):
    """Per-frame forces and torque magnitudes behind the force plots.

    Columns: time, per-site contact force (floor frame, three components
    each), |torque| per joint, root_residual.
    """
    header = ["time"]
    for site in FORCE_SITE_NAMES:
        header += [f"lambda_{site}_x", f"lambda_{site}_y", f"lambda_{site}_z"]
    header += [f"tau_{name}" for name in joint_names]
    header += ["root_residual"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for f in sequence.frames:
            row = [f.timestamp]
            row += list(f.lam.reshape(-1))
            row += list(np.abs(f.tau[6:]))
            row += [f.root_residual]
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_force_csv(path):
    """Round-trip reader for the force CSV; returns (header, (T, C) array)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [np.array([float(v) for v in line.split(",")]) for line in fh if line.strip()]
    return header, np.stack(rows)


# -- metrics report ---------------------------------------------------------------


def write_metrics_json(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
