"""Command-line entry point.

Verbs: gen-data, train, finetune2d, refine, eval, export-forces. One TOML
config file carries every parameter; a few flags override per run. Exit
codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import io as pio
from .camera import Keypoints2D
from .config import BadConfig, load_config
from .cycle import ContactLabels
from .dynamics import SingularMass
from .metrics import LengthMismatch, compute_pose_metrics
from .pipeline import (
    MotionFrame,
    MotionSequence,
    PipelineTimings,
    build_cycle,
    build_networks,
    load_model,
    load_or_fresh_networks,
    run_pipeline,
    save_all,
)
from .projection import ProjectionFailure
from .skeleton import SkeletonFileError, forward_kinematics
from .synthetic import FAMILIES, GeneratorConfig, generate
from .training import NonFiniteLoss, Schedule, pretrain, joint_train, finetune_2d

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="physrefine",
        description="Physics-based refinement of 2D keypoint motion into plausible 3D dynamics",
    )
    parser.add_argument("--config", required=True, help="TOML run configuration")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic clip (keypoints + ground truth)")
    p.add_argument("--family", choices=FAMILIES, default="standing")
    p.add_argument("--frames", type=int, default=90)
    p.add_argument("--noise-px", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix; writes <out>.keypoints and <out>.gtmotion")

    p = sub.add_parser("train", help="pretrain all four networks, then a joint phase")
    p.add_argument("--data", required=True, nargs="+", help="gtmotion files of training clips")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--joint", action="store_true", help="run the joint phase after pretraining")
    p.add_argument("--log", default=None, help="training log CSV")

    p = sub.add_parser("finetune2d", help="finetune with 2D keypoints only")
    p.add_argument("--data", required=True, nargs="+", help="keypoint files")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("refine", help="run the full pipeline on a keypoint file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="motion file to write")
    p.add_argument("--forces", default=None, help="also export the force CSV here")

    p = sub.add_parser("eval", help="compare a refined motion against ground truth")
    p.add_argument("--pred", required=True, help="motion file from refine")
    p.add_argument("--gt", required=True, help="gtmotion file from gen-data")
    p.add_argument("--out", required=True, help="metrics JSON")

    p = sub.add_parser("export-forces", help="write the force CSV of a motion file")
    p.add_argument("--motion", required=True)
    p.add_argument("--out", required=True)
    return parser


def _sample_to_files(sample, prefix):
    times = np.arange(sample.n_frames) / sample.fps
    frames = [Keypoints2D(sample.pixels2d_observed[t], np.ones(sample.pixels2d.shape[1])) for t in range(sample.n_frames)]
    pio.write_keypoints(prefix + ".keypoints", times, frames)
    gt_frames = [
        MotionFrame(
            timestamp=float(times[t]),
            q=sample.q[t],
            qd=np.zeros(sample.q.shape[1] - 1),
            tau=np.zeros(sample.q.shape[1] - 1),
            contacts=sample.contacts[t],
            lam=np.zeros((4, 3)),
            root_residual=0.0,
        )
        for t in range(sample.n_frames)
    ]
    pio.write_motion(prefix + ".gtmotion", MotionSequence(gt_frames))


def _cmd_gen_data(args, config) -> int:
    model = load_model(config)
    gen_cfg = GeneratorConfig(
        family=args.family,
        n_frames=args.frames,
        fps=config.fps,
        intrinsics=config.intrinsics,
        image_size=config.image_size,
        noise_px=args.noise_px,
        seed=args.seed,
    )
    sample = generate(model, gen_cfg)
    out_dir = os.path.dirname(args.out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    _sample_to_files(sample, args.out)
    print(f"wrote {args.out}.keypoints and {args.out}.gtmotion ({sample.n_frames} frames, {args.family})")
    return EXIT_OK


def _gtmotion_to_sample(path, config, model):
    from .synthetic import TrainingSample
    from .camera import project

    data = pio.read_motion(path)
    q = data["q"]
    joints = np.stack([np.asarray(forward_kinematics(model, qt)) for qt in q])
    pixels = np.stack([np.asarray(project(j, config.intrinsics)) for j in joints])
    return TrainingSample(
        q=q,
        joints3d=joints,
        pixels2d=pixels,
        pixels2d_observed=pixels.copy(),
        contacts=data["contacts"],
        intrinsics=config.intrinsics,
        image_size=config.image_size,
        floor=config.floor,
        fps=config.fps,
        family="file",
    )


def _cmd_train(args, config) -> int:
    model = load_model(config)
    nets = build_networks(config, model)
    samples = [_gtmotion_to_sample(p, config, model) for p in args.data]
    cycle = build_cycle(config, model, nets)
    log = pretrain(nets, model, samples, config.schedule, cycle, frame_period=1.0 / config.fps, window=config.window, log_path=None)
    if args.joint:
        joint_log = joint_train(nets, model, samples, config.schedule, cycle, frame_period=1.0 / config.fps, window=config.window)
        log.rows.extend(joint_log.rows)
    if args.log:
        log.write_csv(args.log)
    save_all(config, nets, args.out)
    print(f"wrote checkpoint {args.out}")
    return EXIT_OK


def _keypoints_to_2d_sample(path, config, model):
    from .synthetic import TrainingSample

    times, frames = pio.read_keypoints(path)
    pixels = np.stack([f.pixels for f in frames])
    tt = pixels.shape[0]
    m_k = pixels.shape[1]
    return TrainingSample(
        q=np.zeros((tt, model.n_q)),
        joints3d=np.zeros((tt, m_k, 3)),
        pixels2d=pixels,
        pixels2d_observed=pixels,
        contacts=np.zeros((tt, 4)),
        intrinsics=config.intrinsics,
        image_size=config.image_size,
        floor=config.floor,
        fps=config.fps,
        family="keypoints",
    )


def _cmd_finetune2d(args, config) -> int:
    model = load_model(config)
    nets = load_or_fresh_networks(config, model)
    samples = [_keypoints_to_2d_sample(p, config, model) for p in args.data]
    finetune_2d(nets, model, samples, config.schedule, window=config.window, epochs=args.epochs, lr=args.lr)
    save_all(config, nets, args.out)
    print(f"wrote checkpoint {args.out}")
    return EXIT_OK


def _cmd_refine(args, config) -> int:
    model = load_model(config)
    nets = load_or_fresh_networks(config, model)
    times, frames = pio.read_keypoints(args.input)
    timings = PipelineTimings()
    seq = run_pipeline(times, frames, config, model, nets, timings)
    pio.write_motion(args.output, seq)
    if args.forces:
        pio.write_force_csv(args.forces, seq, [j.name for j in model.joints])
    print(
        f"wrote {args.output} ({len(seq.frames)} frames, mean refine {timings.mean_refine_ms:.1f} ms/frame)"
    )
    return EXIT_OK


def _cmd_eval(args, config) -> int:
    model = load_model(config)
    pred = pio.read_motion(args.pred)
    gt = pio.read_motion(args.gt)
    if pred["q"].shape[0] != gt["q"].shape[0]:
        raise LengthMismatch(
            f"prediction has {pred['q'].shape[0]} frames, ground truth {gt['q'].shape[0]}"
        )
    pred_joints = np.stack([np.asarray(forward_kinematics(model, qt)) for qt in pred["q"]])
    gt_joints = np.stack([np.asarray(forward_kinematics(model, qt)) for qt in gt["q"]])
    from .camera import project

    gt_pixels = np.stack([np.asarray(project(j, config.intrinsics)) for j in gt_joints])
    heights = np.zeros((pred["q"].shape[0], 4))
    from .skeleton import contact_site_positions

    axis = config.floor.normal_axis
    for t, qt in enumerate(pred["q"]):
        sites = np.asarray(contact_site_positions(model, qt))
        for i in range(4):
            heights[t, i] = float(config.floor.transform.apply(sites[i])[axis])
    report = compute_pose_metrics(
        pred_joints,
        gt_joints,
        intrinsics=config.intrinsics,
        gt_pixels=gt_pixels,
        site_heights=heights,
        contact_gt=gt["contacts"],
    )
    pio.write_metrics_json(args.out, report)
    print(
        f"MPJPE {report.mpjpe_mm:.1f} mm  PA {report.pa_mpjpe_mm:.1f} mm  "
        f"PCK {report.pck_percent:.1f}%  smooth {report.e_smooth_mm:.2f} mm  "
        f"MPE {report.mpe_mm:.1f} mm  PNP {report.pnp_percent:.1f}%"
    )
    return EXIT_OK


def _cmd_export_forces(args, config) -> int:
    model = load_model(config)
    data = pio.read_motion(args.motion)
    tt = data["q"].shape[0]
    frames = [
        MotionFrame(
            timestamp=float(data["t"][k]),
            q=data["q"][k],
            qd=data["qd"][k],
            tau=data["tau"][k],
            contacts=data["contacts"][k],
            lam=data["lam"][k].reshape(4, 3),
            root_residual=float(data["root_residual"][k]),
        )
        for k in range(tt)
    ]
    pio.write_force_csv(args.out, MotionSequence(frames), [j.name for j in model.joints])
    print(f"wrote {args.out}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "finetune2d": _cmd_finetune2d,
    "refine": _cmd_refine,
    "eval": _cmd_eval,
    "export-forces": _cmd_export_forces,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        return _COMMANDS[args.verb](args, config)
    except (BadConfig, SkeletonFileError, FileNotFoundError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (pio.BadKeypointFile, pio.BadMotionFile, LengthMismatch) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (SingularMass, NonFiniteLoss, ProjectionFailure) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
