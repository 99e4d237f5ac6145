"""Command line front end.

Six subcommands: voxelize, flops, train-toy, infer, eval, selfcheck. Every
command is a pure function of (config, inputs, seed): rerunning overwrites
its outputs identically. Failures print one machine-readable JSON object to
stderr and exit nonzero. Report-producing commands write the JSON artifact
plus a CSV and a rendered PNG side by side in the output directory.

VOXELFLOW_THREADS caps the worker count for multi-frame inference; timing
runs ignore it and stay serial so phase clocks are honest.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import reporting
from .config import load_config
from .convs import stack_flops_for_tensor
from .errors import ConfigError, VoxelflowError
from .evaluation import evaluate
from .kitti_io import read_detections, read_kitti_labels, read_velodyne_bin, write_detections
from .pipeline import (
    RunConfig,
    init_model,
    infer_timed,
    load_checkpoint,
    make_suite,
    save_checkpoint,
    train_toy,
)
from .selfcheck import run_selfcheck
from .synthetic import gen_synthetic_scene
from .voxelizer import voxelize


def _ensure_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _threads() -> int:
    raw = os.environ.get("VOXELFLOW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def cmd_voxelize(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.input is not None:
        cloud = read_velodyne_bin(args.input)
    else:
        cloud, _ = gen_synthetic_scene(config.scene_config(seed=args.synthetic))
    voxels, report = voxelize(cloud, config.voxel)
    out = _ensure_dir(args.out)
    with open(out / "voxels.json", "w") as fh:
        json.dump(
            {"report": report.to_json_dict(), "tensor": voxels.to_json_dict()}, fh
        )
    reporting.write_voxel_csv(voxels, out / "voxels.csv")
    reporting.plot_bev_occupancy(voxels, out / "voxels.png")
    _emit(
        {
            "grid_dims": list(voxels.grid_dims),
            "out": str(out),
            **report.to_json_dict(),
        }
    )
    return 0


def cmd_flops(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    cloud, _ = gen_synthetic_scene(config.scene_config())
    voxels, _ = voxelize(cloud, config.voxel)
    c = config.backbone.widths[0]
    monolithic = stack_flops_for_tensor(voxels, [5], c, names=["k5"])
    decoupled = stack_flops_for_tensor(voxels, [3, 3], c, names=["k3_a", "k3_b"])
    payload = {
        "active_sites": voxels.num_active,
        "channels": c,
        "monolithic_k5": monolithic.to_json_dict(),
        "decoupled_2x_k3": decoupled.to_json_dict(),
        "decoupled_smaller": decoupled.total_macs < monolithic.total_macs,
        # Closed form on a fully covered interior site, independent of occupancy.
        "interior_macs_per_site_ratio": {"k5": 125, "2x_k3": 54},
    }
    out = _ensure_dir(args.out)
    with open(out / "flops.json", "w") as fh:
        json.dump(payload, fh, indent=2)
    reporting.write_flops_csv(monolithic, out / "flops_monolithic.csv")
    reporting.write_flops_csv(decoupled, out / "flops_decoupled.csv")
    reporting.plot_flops({"k5": monolithic, "2x k3": decoupled}, out / "flops.png")
    _emit(payload)
    return 0


def cmd_train_toy(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, train=replace(config.train, seed=args.seed))
    scenes = make_suite(config, config.data.frames, config.data.seed)
    model, report = train_toy(scenes, config)
    out = _ensure_dir(args.out)
    save_checkpoint(out / "checkpoint.json", model)
    with open(out / "train_report.json", "w") as fh:
        json.dump(report.to_json_dict(), fh)
    reporting.write_loss_csv(report.steps, out / "loss.csv")
    reporting.plot_loss_curve(report.steps, out / "loss.png")
    for row in report.steps[:: max(1, config.train.log_every)]:
        print(
            f"step {row['step']:4d}  total {row['total']:.4f}  "
            f"cls {row['cls']:.4f}  reg {row['reg']:.4f}  imp {row['imp']:.4f}"
        )
    _emit(
        {
            "initial_loss": report.initial_loss,
            "final_loss": report.final_loss,
            "wall_seconds": report.wall_seconds,
            "checkpoint": str(out / "checkpoint.json"),
        }
    )
    return 0


def _load_model(config: RunConfig, checkpoint: str):
    model = init_model(config, np.random.default_rng(config.train.seed))
    load_checkpoint(checkpoint, model)
    return model


def cmd_infer(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    model = _load_model(config, args.checkpoint)
    if args.input_dir is not None:
        paths = sorted(Path(args.input_dir).glob("*.bin"))
        clouds = [read_velodyne_bin(p) for p in paths]
        names = [p.stem for p in paths]
    else:
        scenes = make_suite(config, args.frames, args.seed)
        clouds = [cloud for cloud, _ in scenes]
        names = [f"{i:06d}" for i in range(len(clouds))]
    detections, timing = infer_timed(
        clouds,
        config,
        model,
        warmup=args.warmup,
        fsm_enabled=False if args.no_fsm else None,
        threads=1 if args.timing else _threads(),
        timing=args.timing,
    )
    out = _ensure_dir(args.out)
    det_dir = _ensure_dir(out / "detections")
    for name, dets in zip(names, detections):
        write_detections(det_dir / f"{name}.txt", dets)
    with open(out / "timing.json", "w") as fh:
        json.dump(timing.to_json_dict(), fh)
    reporting.write_timing_csv(timing.frames, out / "timing.csv")
    reporting.plot_timing(timing.frames, out / "timing.png")
    _emit(
        {
            "frames": len(clouds),
            "timed_frames": len(timing.frames),
            "mean_total_ms": timing.mean("total_ms"),
            "mean_head_nms_ms": timing.mean("head_nms_ms"),
            "detections_dir": str(det_dir),
        }
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    gt_paths = sorted(Path(args.gts).glob("*.txt"))
    if not gt_paths:
        raise ConfigError(f"no .txt label files in {args.gts}")
    det_root = Path(args.dets)
    detections, ground_truths = [], []
    for path in gt_paths:
        ground_truths.append(read_kitti_labels(path))
        det_path = det_root / path.name
        detections.append(read_detections(det_path) if det_path.exists() else [])
    result = evaluate(detections, ground_truths, config.eval, classes=tuple(args.classes))
    out = _ensure_dir(args.out)
    with open(out / "eval.json", "w") as fh:
        json.dump(result.to_json_dict(), fh)
    reporting.write_eval_csv(result, out / "eval.csv")
    reporting.plot_pr_curves(result, out / "pr_curves.png")
    print(result.format_table())
    _emit({"ap": result.ap, "num_frames": result.num_frames, "out": str(out)})
    return 0


def cmd_selfcheck(args: argparse.Namespace) -> int:
    results = run_selfcheck()
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{r.name}] {status}: {r.detail} ({r.seconds:.2f}s)")
    all_passed = all(r.passed for r in results)
    _emit({"passed": all_passed, "checks": [r.to_json_dict() for r in results]})
    return 0 if all_passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelflow",
        description="Sparse voxel convolution engine with a toy LiDAR detection pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="voxelize a scan (or a synthetic scene) and dump the grid")
    p.add_argument("--config", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", help="velodyne .bin file")
    src.add_argument("--synthetic", type=int, default=None, help="synthetic scene seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("flops", help="compare one k=5 layer against two k=3 layers")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("train-toy", help="overfit the toy detector on synthetic frames")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", help="run detection over frames and time the phases")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input-dir", help="directory of .bin scans (default: synthetic frames)")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--seed", type=int, default=100, help="synthetic frame seed")
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--no-fsm", action="store_true", help="bypass the voxel filter")
    p.add_argument(
        "--timing",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="serial per-phase timing (disable to allow threading)",
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="AP over paired detection and label directories")
    p.add_argument("--config", required=True)
    p.add_argument("--dets", required=True, help="directory of detection .txt files")
    p.add_argument("--gts", required=True, help="directory of ground-truth .txt files")
    p.add_argument("--classes", nargs="+", default=["Car"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selfcheck", help="run the built-in oracle suite")
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VoxelflowError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1
    except OSError as exc:
        print(json.dumps({"error": "OSError", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
