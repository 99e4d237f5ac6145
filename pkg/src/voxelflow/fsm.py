"""Quantitative voxel filtering: score every active voxel, keep the top half.

A tiny submanifold head (k=3 conv -> nonlinearity -> 1x1x1 conv -> sigmoid)
predicts an importance weight per voxel. Selection keeps the ceil(ratio * N)
highest-weight voxels (ties broken by canonical coordinate order) and gates
the surviving features by their weights, so downstream consumers see both
fewer sites and importance-scaled values. The implied threshold sigma is the
smallest kept weight.

Supervision is a focal loss against geometric labels: a voxel is positive
when its metric center falls inside any ground-truth box. A random-mask probe
with the same keep budget is provided as the unlearned control.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .convs import ConvParams, init_conv
from .errors import EmptyBatchError, LengthMismatchError, ShapeMismatchError
from .geometry import Box3D, contains_points
from .sparse import Rulebook, SparseTensor, build_rulebook


@dataclass
class FsmParams:
    """Importance head: k=3 submanifold conv (c->hidden), nonlinearity,
    1x1x1 conv (hidden->1), sigmoid."""

    conv1: ConvParams
    conv2: ConvParams
    activation: str = "silu"

    def validate(self, channels: int) -> None:
        if self.conv1.c_in != channels:
            raise ShapeMismatchError(
                f"importance head expects {self.conv1.c_in} channels, got {channels}"
            )
        if self.conv2.kernel_size != 1 or self.conv2.c_out != 1:
            raise ShapeMismatchError("importance head must end in a 1x1x1 conv to 1 channel")
        if self.conv1.c_out != self.conv2.c_in:
            raise ShapeMismatchError("importance head hidden widths disagree")
        if self.conv1.bias is None or self.conv2.bias is None:
            raise ShapeMismatchError("importance head convs must carry biases")


def init_fsm(rng: np.random.Generator, channels: int, hidden: int = 16) -> FsmParams:
    return FsmParams(
        conv1=init_conv(rng, 3, channels, hidden, bias=True),
        conv2=init_conv(rng, 1, hidden, 1, bias=True),
    )


def fsm_param_arrays(params: FsmParams, prefix: str = "fsm") -> dict[str, np.ndarray]:
    return {
        f"{prefix}.conv1.w": params.conv1.weights,
        f"{prefix}.conv1.b": params.conv1.bias,
        f"{prefix}.conv2.w": params.conv2.weights,
        f"{prefix}.conv2.b": params.conv2.bias,
    }


def importance_nodes(
    tape: Tape,
    feats: Node,
    rulebook: Rulebook,
    params: FsmParams,
    prefix: str = "fsm",
) -> Node:
    """Tape-level importance weights, shape (N, 1), values in (0, 1)."""
    w1 = tape.param(f"{prefix}.conv1.w", params.conv1.weights)
    b1 = tape.param(f"{prefix}.conv1.b", params.conv1.bias)
    hidden = ad.activation(params.activation, ad.sparse_conv(feats, w1, b1, rulebook))
    w2 = tape.param(f"{prefix}.conv2.w", params.conv2.weights)
    b2 = tape.param(f"{prefix}.conv2.b", params.conv2.bias)
    h = params.conv2.c_in
    logits = ad.add(ad.matmul(hidden, ad.reshape(w2, (h, 1))), b2)
    return ad.sigmoid(logits)


def predict_importance(tensor: SparseTensor, params: FsmParams) -> np.ndarray:
    """Importance weight per active voxel, shape (N,), each in (0, 1)."""
    params.validate(tensor.channels)
    if tensor.num_active == 0:
        return np.zeros(0)
    rulebook = build_rulebook(tensor, 3)
    tape = Tape()
    node = importance_nodes(tape, tape.const(tensor.features), rulebook, params)
    return node.value[:, 0]


def topk_rows(weights: np.ndarray, keep_ratio: float) -> np.ndarray:
    """Rows of the ceil(ratio*N) largest weights, ties to lower row index.

    The result is sorted ascending so downstream tensors stay canonical.
    """
    n = weights.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if not 0.0 < keep_ratio <= 1.0:
        raise ShapeMismatchError(f"keep ratio must be in (0, 1], got {keep_ratio}")
    k = ceil(keep_ratio * n)
    order = np.argsort(-weights, kind="stable")  # stable: ties keep row order
    return np.sort(order[:k])


@dataclass
class ImportanceResult:
    """Selection record: all weights, kept rows, and the implied threshold."""

    weights: np.ndarray
    kept_rows: np.ndarray
    keep_ratio: float
    threshold: float | None

    @property
    def num_kept(self) -> int:
        return int(self.kept_rows.shape[0])

    def to_json_dict(self) -> dict:
        return {
            "keep_ratio": self.keep_ratio,
            "threshold": self.threshold,
            "num_total": int(self.weights.shape[0]),
            "num_kept": self.num_kept,
            "weights": self.weights.tolist(),
            "kept_rows": self.kept_rows.tolist(),
        }


def select_topk(
    tensor: SparseTensor, weights: np.ndarray, keep_ratio: float
) -> tuple[SparseTensor, ImportanceResult]:
    """Keep the highest-weight voxels and gate their features by the weights."""
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != tensor.num_active:
        raise LengthMismatchError(
            f"{weights.shape[0]} weights for {tensor.num_active} voxels"
        )
    kept = topk_rows(weights, keep_ratio)
    if kept.shape[0] == 0:
        result = ImportanceResult(weights, kept, keep_ratio, None)
        return SparseTensor.empty(tensor.grid_dims, tensor.channels), result
    gated = weights[kept, None] * tensor.features[kept]
    out = SparseTensor(tensor.grid_dims, tensor.coords[kept], gated)
    threshold = float(weights[kept].min())
    return out, ImportanceResult(weights, kept, keep_ratio, threshold)


def fsm_targets(
    coords: np.ndarray,
    range_min: np.ndarray,
    voxel_size: np.ndarray,
    boxes: list[Box3D],
) -> np.ndarray:
    """Geometric labels: 1.0 where a voxel's metric center is inside any box.

    `voxel_size` is the effective size at the feature map's stride. A center
    exactly on a box face counts inside.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    centers = np.asarray(range_min) + (coords + 0.5) * np.asarray(voxel_size)
    labels = np.zeros(coords.shape[0], dtype=np.float64)
    for box in boxes:
        labels = np.maximum(labels, contains_points(box, centers).astype(np.float64))
    return labels


def focal_loss(
    pred_probs: np.ndarray,
    labels: np.ndarray,
    alpha_f: float = 0.25,
    gamma_f: float = 2.0,
) -> float:
    """Mean focal loss over probabilities (clamped to [1e-7, 1 - 1e-7])."""
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if pred_probs.size == 0:
        raise EmptyBatchError("focal loss over an empty batch")
    if pred_probs.shape != labels.shape:
        raise LengthMismatchError(
            f"probabilities {pred_probs.shape} vs labels {labels.shape}"
        )
    p = np.clip(pred_probs, 1e-7, 1.0 - 1e-7)
    pos = -alpha_f * labels * (1.0 - p) ** gamma_f * np.log(p)
    neg = -(1.0 - alpha_f) * (1.0 - labels) * p**gamma_f * np.log(1.0 - p)
    return float(np.mean(pos + neg))


def random_mask_probe(
    tensor: SparseTensor, keep_fraction: float, rng: np.random.Generator
) -> SparseTensor:
    """Unlearned control: keep a uniform random ceil(fraction*N) subset, ungated."""
    n = tensor.num_active
    if n == 0:
        return tensor
    if not 0.0 < keep_fraction <= 1.0:
        raise ShapeMismatchError(f"keep fraction must be in (0, 1], got {keep_fraction}")
    k = ceil(keep_fraction * n)
    kept = np.sort(rng.choice(n, size=k, replace=False))
    return SparseTensor(tensor.grid_dims, tensor.coords[kept], tensor.features[kept])
