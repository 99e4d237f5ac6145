"""Anchor-free BEV detection head, box codec, and rotated NMS.

Every BEV cell predicts one sigmoid objectness score and eight regression
channels (dx, dy, dz, log l, log w, log h, sin yaw, cos yaw) relative to the
cell center and a fixed reference height. The head runs two small stacks of
same-padding 2D convs (classification and regression) and can be evaluated
either densely or at an explicit list of cells; unevaluated cells keep score
zero and never decode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .convs import Conv2dParams, all_cells, dilate_cells, init_conv2d
from .errors import EmptyBatchError, ShapeMismatchError
from .geometry import Box3D, Detection, contains_points_bev

REG_CHANNELS = 8


@dataclass
class CellGrid:
    """Metric geometry of the BEV map: origin, cell size, reference height."""

    origin: tuple[float, float]
    cell_size: tuple[float, float]
    shape: tuple[int, int]
    z_ref: float

    def centers(self, cells: np.ndarray) -> np.ndarray:
        """Metric (M, 2) centers of integer (M, 2) cells."""
        cells = np.asarray(cells, dtype=np.float64).reshape(-1, 2)
        return np.asarray(self.origin) + (cells + 0.5) * np.asarray(self.cell_size)

    def all_cells(self) -> np.ndarray:
        return all_cells(self.shape)


@dataclass
class HeadParams:
    """Classification and regression conv stacks over the BEV map."""

    cls_convs: list[Conv2dParams]
    reg_convs: list[Conv2dParams]
    activation: str = "silu"

    def validate(self, channels: int) -> None:
        for stack, last_out, label in (
            (self.cls_convs, 1, "classification"),
            (self.reg_convs, REG_CHANNELS, "regression"),
        ):
            if not stack:
                raise ShapeMismatchError(f"{label} stack is empty")
            if stack[0].c_in != channels:
                raise ShapeMismatchError(
                    f"{label} stack expects {stack[0].c_in} channels, BEV has {channels}"
                )
            for a, b in zip(stack, stack[1:]):
                if a.c_out != b.c_in:
                    raise ShapeMismatchError(f"{label} stack widths disagree")
            if stack[-1].c_out != last_out:
                raise ShapeMismatchError(
                    f"{label} stack must end in {last_out} channels, got {stack[-1].c_out}"
                )


def init_head(rng: np.random.Generator, channels: int, hidden: int = 32) -> HeadParams:
    # k=3 mixer then 1x1 projection: head cost stays proportional to the
    # evaluated cell count (a second k=3 would need dilated intermediates).
    return HeadParams(
        cls_convs=[init_conv2d(rng, 3, channels, hidden), init_conv2d(rng, 1, hidden, 1)],
        reg_convs=[
            init_conv2d(rng, 3, channels, hidden),
            init_conv2d(rng, 1, hidden, REG_CHANNELS),
        ],
    )


def head_param_arrays(params: HeadParams, prefix: str = "head") -> dict[str, np.ndarray]:
    out = {}
    for stack_name, stack in (("cls", params.cls_convs), ("reg", params.reg_convs)):
        for i, conv in enumerate(stack):
            out[f"{prefix}.{stack_name}{i}.w"] = conv.weights
            if conv.bias is not None:
                out[f"{prefix}.{stack_name}{i}.b"] = conv.bias
    return out


def _stack_nodes(
    tape: Tape,
    bev: Node,
    stack: list[Conv2dParams],
    cells: np.ndarray,
    activation: str,
    prefix: str,
) -> Node:
    """Run a conv stack so its output at `cells` equals dense evaluation.

    Intermediate layers are evaluated on cells dilated by the remaining
    receptive radius and scattered back onto a zero map; cells outside that
    dilation cannot influence the requested outputs.
    """
    shape = (bev.value.shape[0], bev.value.shape[1])
    radii = [(conv.kernel_size - 1) // 2 for conv in stack]
    h = bev
    for i, conv in enumerate(stack):
        remaining = sum(radii[i + 1 :])
        layer_cells = dilate_cells(cells, remaining, shape) if remaining else cells
        w = tape.param(f"{prefix}{i}.w", conv.weights)
        b = tape.param(f"{prefix}{i}.b", conv.bias) if conv.bias is not None else None
        out = ad.conv2d_at(h, w, b, layer_cells)
        if i < len(stack) - 1:
            out = ad.activation(activation, out)
            h = ad.scatter_cells(out, layer_cells, shape)
        else:
            return out
    raise AssertionError("unreachable")


def head_nodes(
    tape: Tape,
    bev: Node,
    params: HeadParams,
    cells: np.ndarray | None = None,
    prefix: str = "head",
) -> tuple[Node, Node, np.ndarray]:
    """Per-cell (cls_logits (M,1), reg (M,8), cells) on the tape."""
    if cells is None:
        cells = all_cells((bev.value.shape[0], bev.value.shape[1]))
    cls_logits = _stack_nodes(tape, bev, params.cls_convs, cells, params.activation, f"{prefix}.cls")
    reg = _stack_nodes(tape, bev, params.reg_convs, cells, params.activation, f"{prefix}.reg")
    return cls_logits, reg, cells


def head_forward(
    bev: np.ndarray, params: HeadParams, cells: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Dense (H, W, 1) sigmoid score map and (H, W, 8) regression map.

    With an explicit cell list only those cells are evaluated; the rest stay
    zero (score zero can never pass a positive decode threshold).
    """
    params.validate(bev.shape[2])
    tape = Tape()
    cls_logits, reg, cells = head_nodes(tape, tape.const(bev), params, cells)
    h, w = bev.shape[0], bev.shape[1]
    score_map = np.zeros((h, w, 1))
    reg_map = np.zeros((h, w, REG_CHANNELS))
    score_map[cells[:, 0], cells[:, 1]] = ad.sigmoid(cls_logits).value
    reg_map[cells[:, 0], cells[:, 1]] = reg.value
    return score_map, reg_map


def encode_box(box: Box3D, cell_center: np.ndarray, z_ref: float) -> np.ndarray:
    """Regression target for a box relative to a cell center."""
    dims = np.maximum(box.dims, 1e-6)
    return np.array(
        [
            box.center[0] - cell_center[0],
            box.center[1] - cell_center[1],
            box.center[2] - z_ref,
            np.log(dims[0]),
            np.log(dims[1]),
            np.log(dims[2]),
            np.sin(box.yaw),
            np.cos(box.yaw),
        ]
    )


def decode_cell(reg: np.ndarray, cell_center: np.ndarray, z_ref: float) -> Box3D:
    """Inverse of encode_box; zero regression gives a unit-exp box at the cell."""
    center = np.array(
        [cell_center[0] + reg[0], cell_center[1] + reg[1], z_ref + reg[2]]
    )
    dims = np.exp(reg[3:6])
    yaw = float(np.arctan2(reg[6], reg[7]))
    return Box3D(center, dims, yaw)


def decode_boxes(
    score_map: np.ndarray,
    reg_map: np.ndarray,
    grid: CellGrid,
    score_threshold: float,
) -> list[Detection]:
    """All cells at or above threshold, decoded and sorted by descending score.

    Ordering ties break on (row, col) so decoding is deterministic.
    """
    scores = score_map[:, :, 0]
    hits = np.argwhere(scores >= score_threshold)
    if hits.shape[0] == 0:
        return []
    cell_scores = scores[hits[:, 0], hits[:, 1]]
    order = np.lexsort((hits[:, 1], hits[:, 0], -cell_scores))
    detections = []
    centers = grid.centers(hits)
    for i in order:
        box = decode_cell(reg_map[hits[i, 0], hits[i, 1]], centers[i], grid.z_ref)
        detections.append(Detection(box=box, score=float(cell_scores[i]), class_id=0))
    return detections


def nms_bev(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy score-descending suppression of BEV IoU > threshold, per class."""
    from .evaluation import iou_bev  # local import: evaluation owns the IoU measure

    centers = np.array([d.box.center[:2] for d in detections]).reshape(-1, 2)
    # BEV circumradius; separations beyond the sum cannot intersect.
    radii = np.array([0.5 * float(np.hypot(d.box.dims[0], d.box.dims[1])) for d in detections])
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    kept: list[int] = []
    for i in order:
        det = detections[i]
        suppressed = False
        for j in kept:
            other = detections[j]
            if other.class_id != det.class_id:
                continue
            if float(np.hypot(*(centers[i] - centers[j]))) > radii[i] + radii[j]:
                continue
            if iou_bev(other.box, det.box) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return [detections[i] for i in kept]


def assign_cells_to_boxes(
    cells: np.ndarray, grid: CellGrid, boxes: list[Box3D]
) -> np.ndarray:
    """Index of the first box whose BEV footprint contains each cell center, else -1."""
    assign = np.full(cells.shape[0], -1, dtype=np.int64)
    if cells.shape[0] == 0:
        return assign
    centers = grid.centers(cells)
    for bi, box in enumerate(boxes):
        inside = contains_points_bev(box, centers) & (assign < 0)
        assign[inside] = bi
    return assign


def detection_loss_nodes(
    tape: Tape,
    cls_logits: Node,
    reg: Node,
    cells: np.ndarray,
    grid: CellGrid,
    boxes: list[Box3D],
    alpha_f: float = 0.25,
    gamma_f: float = 2.0,
    reg_weight: float = 2.0,
) -> tuple[Node, Node, Node]:
    """(total, cls, reg) losses: focal objectness + smooth-L1 box regression.

    Positive cells are those whose center falls inside a ground-truth BEV
    footprint. The regression term averages over positive cells and is zero
    when there are none. Total = cls + reg_weight * reg.
    """
    if cells.shape[0] == 0:
        raise EmptyBatchError("detection loss over zero evaluated cells")
    assign = assign_cells_to_boxes(cells, grid, boxes)
    labels = (assign >= 0).astype(np.float64)[:, None]
    probs = ad.sigmoid(cls_logits)
    cls_loss = ad.focal_loss_nodes(probs, labels, alpha_f, gamma_f)
    positive = np.flatnonzero(assign >= 0)
    if positive.shape[0]:
        centers = grid.centers(cells)
        targets = np.stack(
            [
                encode_box(boxes[assign[i]], centers[i], grid.z_ref)
                for i in positive
            ]
        )
        diffs = ad.add(ad.take_rows(reg, positive), tape.const(-targets))
        reg_loss = ad.mean_all(ad.smooth_l1(diffs))
    else:
        reg_loss = tape.const(0.0)
    total = ad.add(cls_loss, ad.scale(reg_loss, reg_weight))
    return total, cls_loss, reg_loss


def detection_loss(
    score_map: np.ndarray,
    reg_map: np.ndarray,
    grid: CellGrid,
    boxes: list[Box3D],
    alpha_f: float = 0.25,
    gamma_f: float = 2.0,
    reg_weight: float = 2.0,
) -> float:
    """Loss over dense maps (scores already sigmoided), for oracle checks."""
    cells = all_cells((score_map.shape[0], score_map.shape[1]))
    assign = assign_cells_to_boxes(cells, grid, boxes)
    labels = (assign >= 0).astype(np.float64)
    probs = score_map[cells[:, 0], cells[:, 1], 0]
    from .fsm import focal_loss  # shared definition

    cls = focal_loss(probs, labels, alpha_f, gamma_f)
    positive = np.flatnonzero(assign >= 0)
    if positive.shape[0] == 0:
        return cls
    centers = grid.centers(cells)
    reg_rows = reg_map[cells[positive, 0], cells[positive, 1]]
    targets = np.stack(
        [encode_box(boxes[assign[i]], centers[i], grid.z_ref) for i in positive]
    )
    d = reg_rows - targets
    huber = np.where(np.abs(d) < 1.0, 0.5 * d * d, np.abs(d) - 0.5)
    return cls + reg_weight * float(np.mean(huber))
