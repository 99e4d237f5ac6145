"""Rotated-box overlap, difficulty bucketing, and average precision.

BEV IoU intersects the two footprint rectangles with Sutherland-Hodgman
convex clipping; 3D IoU multiplies the BEV intersection by the z overlap.
AP uses greedy score-descending matching against per-frame ground truth and
the 40-point interpolated integration rule: precision at each sampled recall
is the maximum precision at any achieved recall at least as large.

Ground truths in a harder bucket than the one under evaluation, DontCare
rows, and unknown-class rows are neutral: detections matching them are
dropped from the ranking instead of counted as false positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatchError, NoGroundTruthError
from .geometry import Box3D, Detection, bev_corners
from .kitti_io import GroundTruth

DIFFICULTIES = ("easy", "moderate", "hard")

# Per-bucket gates: minimum 2D box height (px), max occlusion, max truncation.
DIFFICULTY_GATES = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}

DEFAULT_IOU_THRESHOLDS = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}


@dataclass
class EvalConfig:
    iou_thresholds: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_IOU_THRESHOLDS)
    )
    num_recall_points: int = 40
    use_3d_iou: bool = True


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip a polygon by each edge of a convex CCW window."""
    output = list(subject)
    for i in range(len(clip)):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % len(clip)]
        edge = b - a
        polygon = output
        output = []
        prev = polygon[-1]
        prev_inside = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0.0
        for point in polygon:
            inside = edge[0] * (point[1] - a[1]) - edge[1] * (point[0] - a[0]) >= 0.0
            if inside != prev_inside:
                delta = point - prev
                denom = edge[0] * delta[1] - edge[1] * delta[0]
                if denom != 0.0:
                    t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                    output.append(prev + t * delta)
            if inside:
                output.append(point)
            prev = point
            prev_inside = inside
    return np.asarray(output, dtype=np.float64).reshape(-1, 2)


def _polygon_area(points: np.ndarray) -> float:
    if points.shape[0] < 3:
        return 0.0
    x, y = points[:, 0], points[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    return _polygon_area(_clip_polygon(bev_corners(a), bev_corners(b)))


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Rotated-rectangle IoU of the two BEV footprints, in [0, 1]."""
    inter = bev_intersection_area(a, b)
    union = a.bev_area + b.bev_area - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """BEV intersection times z overlap, over the volume union."""
    inter_bev = bev_intersection_area(a, b)
    za0, za1 = a.z_interval
    zb0, zb1 = b.z_interval
    dz = min(za1, zb1) - max(za0, zb0)
    inter = inter_bev * max(dz, 0.0)
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def assign_difficulty(gt: GroundTruth) -> str:
    """Easiest bucket whose gates the ground truth passes, else "ignored"."""
    for name in DIFFICULTIES:
        min_height, max_occlusion, max_truncation = DIFFICULTY_GATES[name]
        if (
            gt.bbox_height >= min_height
            and gt.occluded <= max_occlusion
            and gt.truncated <= max_truncation
        ):
            return name
    return "ignored"


_DIFFICULTY_RANK = {name: i for i, name in enumerate(DIFFICULTIES)}


def _split_ground_truth(
    gts: list[GroundTruth], class_name: str, difficulty: str
) -> tuple[list[GroundTruth], list[GroundTruth]]:
    """(counted, neutral) ground truths for one frame."""
    counted: list[GroundTruth] = []
    neutral: list[GroundTruth] = []
    rank = _DIFFICULTY_RANK[difficulty]
    for gt in gts:
        if gt.class_name == class_name:
            bucket = assign_difficulty(gt)
            if bucket != "ignored" and _DIFFICULTY_RANK[bucket] <= rank:
                counted.append(gt)
            else:
                neutral.append(gt)
        elif gt.class_name in ("DontCare", "Other"):
            neutral.append(gt)
    return counted, neutral


@dataclass
class PrCurve:
    """Raw cumulative precision/recall points in descending-score order."""

    precisions: np.ndarray
    recalls: np.ndarray
    num_ground_truth: int

    def interpolated_precision(self, recall: float) -> float:
        mask = self.recalls >= recall
        if not mask.any():
            return 0.0
        return float(self.precisions[mask].max())


def _match_detections(
    detections: list[list[Detection]],
    ground_truths: list[list[GroundTruth]],
    class_name: str,
    difficulty: str,
    config: EvalConfig,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Global score-ranked (scores, tp_flags) with neutral hits removed."""
    if len(detections) != len(ground_truths):
        raise LengthMismatchError(
            f"{len(detections)} detection frames vs {len(ground_truths)} ground-truth frames"
        )
    iou_fn = iou_3d if config.use_3d_iou else iou_bev
    threshold = config.iou_thresholds.get(class_name, 0.5)
    num_gt = 0
    ranked: list[tuple[float, int, int]] = []  # (score, frame, detection index)
    frame_splits = []
    for frame, (dets, gts) in enumerate(zip(detections, ground_truths)):
        counted, neutral = _split_ground_truth(gts, class_name, difficulty)
        num_gt += len(counted)
        frame_splits.append((counted, neutral))
        for di, det in enumerate(dets):
            if det.class_name == class_name:
                ranked.append((det.score, frame, di))
    ranked.sort(key=lambda item: (-item[0], item[1], item[2]))
    matched: list[set[int]] = [set() for _ in frame_splits]
    scores: list[float] = []
    tp_flags: list[bool] = []
    for score, frame, di in ranked:
        det = detections[frame][di]
        counted, neutral = frame_splits[frame]
        best_iou, best_gt = 0.0, -1
        for gi, gt in enumerate(counted):
            if gi in matched[frame]:
                continue
            overlap = iou_fn(det.box, gt.box3d_lidar)
            if overlap >= threshold and overlap > best_iou:
                best_iou, best_gt = overlap, gi
        if best_gt >= 0:
            matched[frame].add(best_gt)
            scores.append(score)
            tp_flags.append(True)
            continue
        neutral_hit = any(
            gt.box3d_lidar is not None and iou_fn(det.box, gt.box3d_lidar) >= threshold
            for gt in neutral
        )
        if neutral_hit:
            continue  # neither TP nor FP
        scores.append(score)
        tp_flags.append(False)
    return np.asarray(scores), np.asarray(tp_flags, dtype=bool), num_gt


def pr_curve(
    detections: list[list[Detection]],
    ground_truths: list[list[GroundTruth]],
    class_name: str,
    difficulty: str,
    config: EvalConfig | None = None,
) -> PrCurve:
    """Cumulative PR points for one class/difficulty bucket.

    Raises NoGroundTruthError when the bucket contains no counted boxes.
    """
    config = config or EvalConfig()
    _, tp_flags, num_gt = _match_detections(
        detections, ground_truths, class_name, difficulty, config
    )
    if num_gt == 0:
        raise NoGroundTruthError(f"no {class_name}/{difficulty} ground truth in the batch")
    tp_cum = np.cumsum(tp_flags)
    ranks = np.arange(1, tp_flags.shape[0] + 1)
    precisions = tp_cum / ranks if tp_flags.shape[0] else np.zeros(0)
    recalls = tp_cum / num_gt if tp_flags.shape[0] else np.zeros(0)
    return PrCurve(precisions, recalls, num_gt)


def ap_from_curve(curve: PrCurve, num_recall_points: int) -> float:
    """Mean interpolated precision over {1/R, 2/R, ..., 1} recall points."""
    points = (np.arange(num_recall_points) + 1.0) / num_recall_points
    return float(
        np.mean([curve.interpolated_precision(r) for r in points])
    )


def ap_r40(
    detections: list[list[Detection]],
    ground_truths: list[list[GroundTruth]],
    class_name: str,
    difficulty: str,
    config: EvalConfig | None = None,
) -> float:
    """40-point interpolated AP for one class and difficulty."""
    config = config or EvalConfig()
    return ap_from_curve(
        pr_curve(detections, ground_truths, class_name, difficulty, config), 40
    )


def ap_r11(
    detections: list[list[Detection]],
    ground_truths: list[list[GroundTruth]],
    class_name: str,
    difficulty: str,
    config: EvalConfig | None = None,
) -> float:
    """Legacy 11-point variant: recall points {0, 0.1, ..., 1}."""
    config = config or EvalConfig()
    curve = pr_curve(detections, ground_truths, class_name, difficulty, config)
    points = np.linspace(0.0, 1.0, 11)
    return float(np.mean([curve.interpolated_precision(r) for r in points]))


@dataclass
class EvalResult:
    """AP per (class, difficulty); None marks an empty bucket."""

    ap: dict[str, dict[str, float | None]]
    curves: dict[str, dict[str, PrCurve | None]]
    num_frames: int
    iou_kind: str

    def to_json_dict(self) -> dict:
        return {
            "num_frames": self.num_frames,
            "iou_kind": self.iou_kind,
            "ap": self.ap,
            "curves": {
                cls: {
                    diff: (
                        None
                        if curve is None
                        else {
                            "precisions": curve.precisions.tolist(),
                            "recalls": curve.recalls.tolist(),
                            "num_ground_truth": curve.num_ground_truth,
                        }
                    )
                    for diff, curve in per_class.items()
                }
                for cls, per_class in self.curves.items()
            },
        }

    def format_table(self) -> str:
        """Fixed-width text table, classes by row block, difficulties by column."""
        lines = [f"{'class':<12} {'easy':>10} {'moderate':>10} {'hard':>10}"]
        for cls, per_diff in self.ap.items():
            cells = []
            for diff in DIFFICULTIES:
                value = per_diff.get(diff)
                cells.append(f"{value * 100.0:10.2f}" if value is not None else f"{'-':>10}")
            lines.append(f"{cls:<12} {cells[0]} {cells[1]} {cells[2]}")
        return "\n".join(lines)


def evaluate(
    detections: list[list[Detection]],
    ground_truths: list[list[GroundTruth]],
    config: EvalConfig | None = None,
    classes: tuple[str, ...] = ("Car",),
) -> EvalResult:
    """AP table over the requested classes and all three difficulty buckets."""
    config = config or EvalConfig()
    ap: dict[str, dict[str, float | None]] = {}
    curves: dict[str, dict[str, PrCurve | None]] = {}
    for cls in classes:
        ap[cls] = {}
        curves[cls] = {}
        for diff in DIFFICULTIES:
            try:
                curve = pr_curve(detections, ground_truths, cls, diff, config)
            except NoGroundTruthError:
                ap[cls][diff] = None
                curves[cls][diff] = None
                continue
            ap[cls][diff] = ap_from_curve(curve, config.num_recall_points)
            curves[cls][diff] = curve
    return EvalResult(
        ap=ap,
        curves=curves,
        num_frames=len(detections),
        iou_kind="3d" if config.use_3d_iou else "bev",
    )
