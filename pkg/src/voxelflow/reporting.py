"""Report rendering: every CLI report writes delimited rows plus a figure.

All figures go through the Agg backend so report generation works headless.
Writers take the already-computed report object and a target path; callers
own directory creation and naming.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .convs import FlopsReport
from .evaluation import DIFFICULTIES, EvalResult
from .sparse import SparseTensor

_DPI = 120


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Training loss.


def write_loss_csv(steps: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "total", "cls", "reg", "imp"])
        for row in steps:
            writer.writerow([row["step"], row["total"], row["cls"], row["reg"], row["imp"]])


def plot_loss_curve(steps: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = [row["step"] for row in steps]
    for key in ("total", "cls", "reg", "imp"):
        ys = [row[key] for row in steps]
        if key == "imp" and not any(ys):
            continue
        ax.plot(xs, ys, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("training loss")
    _save(fig, path)


# ---------------------------------------------------------------------------
# Evaluation.


def write_eval_csv(result: EvalResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "difficulty", "ap", "num_ground_truth"])
        for cls, per_diff in result.ap.items():
            for diff in DIFFICULTIES:
                curve = result.curves[cls][diff]
                writer.writerow(
                    [
                        cls,
                        diff,
                        "" if per_diff[diff] is None else f"{per_diff[diff]:.6f}",
                        0 if curve is None else curve.num_ground_truth,
                    ]
                )


def plot_pr_curves(result: EvalResult, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    drew = False
    for cls, per_diff in result.curves.items():
        for diff in DIFFICULTIES:
            curve = per_diff[diff]
            if curve is None or curve.recalls.size == 0:
                continue
            ap = result.ap[cls][diff]
            ax.plot(
                np.concatenate([[0.0], curve.recalls]),
                np.concatenate([[curve.precisions[0]], curve.precisions]),
                label=f"{cls} {diff} (AP {ap * 100.0:.1f})",
            )
            drew = True
    if not drew:
        ax.text(0.5, 0.5, "no matched ground truth", ha="center", va="center")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower left", fontsize=8)
    ax.set_title(f"precision-recall ({result.iou_kind} IoU)")
    _save(fig, path)


# ---------------------------------------------------------------------------
# Timing.

_PHASES = ("voxelize", "backbone", "fsm", "head_nms")


def write_timing_csv(frames: list[dict], path) -> None:
    columns = [
        "frame",
        "total_ms",
        *[f"{p}_ms" for p in _PHASES],
        "sites_final",
        "sites_head",
        "cells_head",
        "num_detections",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for i, row in enumerate(frames):
            writer.writerow([i] + [row[c] for c in columns[1:]])


def plot_timing(frames: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    if frames:
        means = [float(np.mean([f[f"{p}_ms"] for f in frames])) for p in _PHASES]
        total = float(np.mean([f["total_ms"] for f in frames]))
        ax.bar(_PHASES, means)
        ax.set_title(f"mean per-frame phase time (total {total:.1f} ms, n={len(frames)})")
    else:
        ax.set_title("no timed frames")
    ax.set_ylabel("ms")
    _save(fig, path)


# ---------------------------------------------------------------------------
# FLOPs.


def write_flops_csv(report: FlopsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "pair_count", "c_in", "c_out", "macs", "flops"])
        for layer in report.layers:
            writer.writerow(
                [layer.name, layer.pair_count, layer.c_in, layer.c_out, layer.macs, layer.flops]
            )
        writer.writerow(["total", "", "", "", report.total_macs, report.total_flops])


def plot_flops(reports: dict[str, FlopsReport], path) -> None:
    """Total MACs of each labeled stack side by side."""
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(reports)
    ax.bar(names, [reports[n].total_macs for n in names])
    ax.set_ylabel("MACs")
    ax.set_title("multiply-accumulates per stack")
    _save(fig, path)


# ---------------------------------------------------------------------------
# Sweeps.


def _ap_rows(result: EvalResult, cls: str = "Car") -> list[float]:
    per_diff = result.ap.get(cls, {})
    return [
        float("nan") if per_diff.get(d) is None else per_diff[d] * 100.0
        for d in DIFFICULTIES
    ]


def write_stage_sweep_csv(results: dict[int, EvalResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", *DIFFICULTIES])
        for stage in sorted(results):
            writer.writerow([stage, *_ap_rows(results[stage])])


def plot_stage_sweep(results: dict[int, EvalResult], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    stages = sorted(results)
    for di, diff in enumerate(DIFFICULTIES):
        ax.plot(stages, [_ap_rows(results[s])[di] for s in stages], marker="o", label=diff)
    ax.set_xticks(stages)
    ax.set_xlabel("fusion block placement (stage)")
    ax.set_ylabel("AP (%)")
    ax.legend()
    ax.set_title("fusion placement sweep")
    _save(fig, path)


def write_fsm_sweep_csv(results: dict[tuple[float, float], EvalResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["keep_ratio", "lambda_imp", *DIFFICULTIES])
        for ratio, lam in sorted(results):
            writer.writerow([ratio, lam, *_ap_rows(results[(ratio, lam)])])


def plot_fsm_sweep(results: dict[tuple[float, float], EvalResult], path) -> None:
    """Moderate AP against keep ratio, one line per supervision weight."""
    fig, ax = plt.subplots(figsize=(6, 4))
    lambdas = sorted({lam for _, lam in results})
    ratios = sorted({ratio for ratio, _ in results})
    for lam in lambdas:
        ys = [_ap_rows(results[(r, lam)])[1] for r in ratios if (r, lam) in results]
        xs = [r for r in ratios if (r, lam) in results]
        ax.plot(xs, ys, marker="o", label=f"weight {lam:g}")
    ax.set_xlabel("keep ratio")
    ax.set_ylabel("moderate AP (%)")
    ax.legend()
    ax.set_title("voxel filter sweep")
    _save(fig, path)


# ---------------------------------------------------------------------------
# Voxel grids.


def write_voxel_csv(tensor: SparseTensor, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ix", "iy", "iz", "mean_x", "mean_y", "mean_z", "mean_intensity"])
        for coord, feat in zip(tensor.coords, tensor.features):
            writer.writerow([*coord.tolist(), *[f"{v:.6f}" for v in feat.tolist()]])


def plot_bev_occupancy(tensor: SparseTensor, path) -> None:
    """Top-down scatter of active voxels, colored by height index."""
    fig, ax = plt.subplots(figsize=(6, 6))
    if tensor.num_active:
        sc = ax.scatter(
            tensor.coords[:, 0], tensor.coords[:, 1], c=tensor.coords[:, 2], s=4, cmap="viridis"
        )
        fig.colorbar(sc, ax=ax, label="z index")
    ax.set_xlim(0, tensor.grid_dims[0])
    ax.set_ylim(0, tensor.grid_dims[1])
    ax.set_aspect("equal")
    ax.set_xlabel("x index")
    ax.set_ylabel("y index")
    ax.set_title(f"active voxels ({tensor.num_active})")
    _save(fig, path)
