"""Built-in oracle suite behind the `selfcheck` CLI command.

Each check recomputes the quantity under test with a deliberately naive
independent method (dense arrays, exhaustive loops) and compares. Checks call
the library through module attributes, so a tampered build shows up as a
failed check rather than a crash.

The whole suite is sized to finish well under a minute on a laptop.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import convs, detector, dffm, evaluation, fsm, sparse
from .autodiff import Tape
from .geometry import Box3D, Detection
from .kitti_io import GroundTruth


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "detail": self.detail,
            "seconds": round(self.seconds, 3),
        }


def _random_tensor(
    rng: np.random.Generator, dims: tuple[int, int, int], channels: int, density: float = 0.2
) -> sparse.SparseTensor:
    total = dims[0] * dims[1] * dims[2]
    n = max(1, int(density * total))
    ids = rng.choice(total, size=n, replace=False)
    coords = np.stack(
        [ids // (dims[1] * dims[2]), (ids // dims[2]) % dims[1], ids % dims[2]], axis=1
    )
    return sparse.SparseTensor.create(dims, coords, rng.normal(size=(n, channels)))


def _dense_conv3d(
    dense: np.ndarray,
    active: np.ndarray,
    weights: np.ndarray,
    kernel_size: int,
    stride: int,
    mode: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Naive dense reference: returns (dense output, active output mask).

    Submanifold keeps the input active set; strided activates every output
    site with at least one active input under the kernel footprint.
    """
    nx, ny, nz, c_in = dense.shape
    c_out = weights.shape[2]
    r = kernel_size // 2
    if mode == "submanifold":
        out_dims = (nx, ny, nz)
    else:
        out_dims = (-(-nx // stride), -(-ny // stride), -(-nz // stride))
    out = np.zeros((*out_dims, c_out))
    out_active = np.zeros(out_dims, dtype=bool)
    offsets = [
        (dx, dy, dz)
        for dx in range(-r, r + 1)
        for dy in range(-r, r + 1)
        for dz in range(-r, r + 1)
    ]
    for ox in range(out_dims[0]):
        for oy in range(out_dims[1]):
            for oz in range(out_dims[2]):
                base = np.array([ox, oy, oz]) * (1 if mode == "submanifold" else stride)
                if mode == "submanifold" and not active[ox, oy, oz]:
                    continue
                acc = np.zeros(c_out)
                hit = False
                for ki, (dx, dy, dz) in enumerate(offsets):
                    ix, iy, iz = base[0] + dx, base[1] + dy, base[2] + dz
                    if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz and active[ix, iy, iz]:
                        acc += dense[ix, iy, iz] @ weights[ki]
                        hit = True
                if mode == "submanifold" or hit:
                    out[ox, oy, oz] = acc
                    out_active[ox, oy, oz] = True
    return out, out_active


def check_dense_equivalence(trials: int = 12, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(trials):
        dims = tuple(int(d) for d in rng.integers(3, 9, size=3))
        channels = int(rng.integers(1, 4))
        tensor = _random_tensor(rng, dims, channels)
        dense = sparse.to_dense(tensor)
        active = np.zeros(dims, dtype=bool)
        active[tensor.coords[:, 0], tensor.coords[:, 1], tensor.coords[:, 2]] = True
        for mode, stride in (("submanifold", 1), ("strided", 2)):
            params = convs.init_conv(rng, 3, channels, 2, stride=stride, mode=mode)
            got = convs.sparse_conv(tensor, params)
            want, want_active = _dense_conv3d(dense, active, params.weights, 3, stride, mode)
            got_active = np.zeros(got.grid_dims, dtype=bool)
            got_active[got.coords[:, 0], got.coords[:, 1], got.coords[:, 2]] = True
            if not np.array_equal(got_active, want_active):
                return CheckResult(
                    "dense_equivalence",
                    False,
                    f"active-set mismatch on trial {trial} ({mode})",
                    time.perf_counter() - t0,
                )
            worst = max(worst, float(np.abs(sparse.to_dense(got) - want).max(initial=0.0)))
        if worst > 1e-10:
            break
    passed = worst <= 1e-10
    return CheckResult(
        "dense_equivalence",
        passed,
        f"{trials} tensors, max |dense - sparse| = {worst:.2e}",
        time.perf_counter() - t0,
    )


def check_gradients(seed: int = 1) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    tensor = _random_tensor(rng, (4, 4, 4), 2, density=0.4)
    rulebook = sparse.build_rulebook(tensor, 3)
    weights = rng.normal(size=(27, 2, 3)) * 0.3
    bias = rng.normal(size=3) * 0.1
    labels = rng.integers(0, 2, size=(tensor.num_active, 3)).astype(np.float64)

    def loss_fn(values: dict[str, np.ndarray]) -> float:
        tape = Tape()
        w = tape.param("w", values["w"])
        b = tape.param("b", values["b"])
        y = ad.sparse_conv(tape.const(tensor.features), w, b, rulebook)
        probs = ad.sigmoid(y)
        return float(ad.focal_loss_nodes(probs, labels, 0.25, 2.0).value)

    params = {"w": weights, "b": bias}
    tape = Tape()
    w = tape.param("w", weights)
    b = tape.param("b", bias)
    y = ad.sparse_conv(tape.const(tensor.features), w, b, rulebook)
    loss = ad.focal_loss_nodes(ad.sigmoid(y), labels, 0.25, 2.0)
    analytic = tape.backward(loss)
    numeric = ad.finite_diff(loss_fn, params)
    worst = 0.0
    for name in params:
        denom = np.maximum(np.abs(numeric[name]), 1e-3)
        worst = max(worst, float((np.abs(analytic[name] - numeric[name]) / denom).max()))
    passed = worst < 1e-4
    return CheckResult(
        "gradcheck",
        passed,
        f"max relative gradient error = {worst:.2e}",
        time.perf_counter() - t0,
    )


def _nms_oracle(dets: list[Detection], iou_threshold: float) -> list[int]:
    """Exhaustive greedy reference over the full pairwise IoU matrix."""
    n = len(dets)
    iou = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j and dets[i].class_id == dets[j].class_id:
                iou[i, j] = evaluation.iou_bev(dets[i].box, dets[j].box)
    order = sorted(range(n), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        if all(iou[i, j] <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def _random_detections(rng: np.random.Generator, n: int) -> list[Detection]:
    out = []
    for _ in range(n):
        center = np.array([rng.uniform(0, 10), rng.uniform(-5, 5), rng.uniform(-1, 1)])
        dims = rng.uniform(0.8, 3.0, size=3)
        out.append(
            Detection(
                box=Box3D(center, dims, rng.uniform(-np.pi, np.pi)),
                score=float(rng.uniform(0.05, 1.0)),
                class_id=int(rng.integers(0, 2)),
            )
        )
    return out


def check_nms(trials: int = 150, seed: int = 2) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        dets = _random_detections(rng, int(rng.integers(0, 9)))
        threshold = float(rng.uniform(0.1, 0.7))
        got = detector.nms_bev(dets, threshold)
        want = [dets[i] for i in _nms_oracle(dets, threshold)]
        if [id(d) for d in got] != [id(d) for d in want]:
            return CheckResult(
                "nms_bruteforce",
                False,
                f"kept-set mismatch on trial {trial}",
                time.perf_counter() - t0,
            )
    return CheckResult(
        "nms_bruteforce", True, f"{trials} random sets match", time.perf_counter() - t0
    )


def _ap_oracle(
    detections: list[list[Detection]],
    ground_truths: list[list[GroundTruth]],
    class_name: str,
    difficulty: str,
    config: evaluation.EvalConfig,
) -> float | None:
    """Brute-force AP: explicit greedy matching, then a literal 40-point mean.

    Counted boxes are same-class entries at or below the difficulty bucket;
    same-class harder/ignored boxes plus DontCare/Other rows absorb matches
    without scoring. Ties on IoU go to the earlier ground-truth row.
    """
    iou_fn = evaluation.iou_3d if config.use_3d_iou else evaluation.iou_bev
    threshold = config.iou_thresholds.get(class_name, 0.5)
    rank = {"easy": 0, "moderate": 1, "hard": 2}
    entries = []
    for frame, dets in enumerate(detections):
        for di, det in enumerate(dets):
            if det.class_name == class_name:
                entries.append((det.score, frame, di, det))
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    counted: list[list[GroundTruth]] = []
    neutral: list[list[GroundTruth]] = []
    num_gt = 0
    for gts in ground_truths:
        c, n = [], []
        for gt in gts:
            if gt.class_name == class_name:
                level = evaluation.assign_difficulty(gt)
                if level != "ignored" and rank[level] <= rank[difficulty]:
                    c.append(gt)
                else:
                    n.append(gt)
            elif gt.class_name in ("DontCare", "Other"):
                n.append(gt)
        counted.append(c)
        neutral.append(n)
        num_gt += len(c)
    if num_gt == 0:
        return None
    used: list[set[int]] = [set() for _ in ground_truths]
    flags = []
    for _, frame, _, det in entries:
        best, best_iou = None, 0.0
        for gi, gt in enumerate(counted[frame]):
            if gi in used[frame]:
                continue
            iou = iou_fn(det.box, gt.box3d_lidar)
            if iou >= threshold and iou > best_iou:
                best, best_iou = gi, iou
        if best is not None:
            used[frame].add(best)
            flags.append(1)
            continue
        hit_neutral = any(
            gt.box3d_lidar is not None and iou_fn(det.box, gt.box3d_lidar) >= threshold
            for gt in neutral[frame]
        )
        if not hit_neutral:
            flags.append(0)
    tp = np.cumsum(flags) if flags else np.zeros(0)
    precision = tp / (np.arange(len(flags)) + 1) if flags else np.zeros(0)
    recall = tp / num_gt if flags else np.zeros(0)
    total = 0.0
    for i in range(config.num_recall_points):
        r = (i + 1) / config.num_recall_points
        best_p = 0.0
        for p, rr in zip(precision, recall):
            if rr >= r and p > best_p:
                best_p = p
        total += best_p
    return total / config.num_recall_points


def _random_ground_truth(rng: np.random.Generator, box: Box3D, class_id: int) -> GroundTruth:
    from .geometry import CLASS_NAMES

    l, w, h = box.dims
    x, y, z = box.center
    height = float(rng.uniform(10.0, 90.0))  # spans all difficulty gates
    return GroundTruth(
        class_name=CLASS_NAMES[class_id],
        truncated=float(rng.uniform(0.0, 0.6)),
        occluded=int(rng.integers(0, 4)),
        alpha=0.0,
        bbox2d=(0.0, 0.0, 100.0, height),
        dims_hwl=(h, w, l),
        location=(x, y, z - 0.5 * h),
        rotation_y=box.yaw,
        box3d_lidar=box,
    )


def _random_eval_scene(
    rng: np.random.Generator,
) -> tuple[list[Detection], list[GroundTruth]]:
    gts = []
    dets = []
    for _ in range(int(rng.integers(0, 4))):
        seed_det = _random_detections(rng, 1)[0]
        class_id = int(rng.integers(0, 2))
        gts.append(_random_ground_truth(rng, seed_det.box, class_id))
        if rng.uniform() < 0.7:
            center = seed_det.box.center + rng.normal(0, 0.3, size=3)
            dets.append(
                Detection(
                    Box3D(center, seed_det.box.dims, seed_det.box.yaw + rng.normal(0, 0.1)),
                    score=float(rng.uniform(0.1, 1.0)),
                    class_id=class_id,
                )
            )
    dets.extend(_random_detections(rng, int(rng.integers(0, 3))))
    return dets, gts


def check_ap(trials: int = 60, seed: int = 3) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    config = evaluation.EvalConfig()
    worst = 0.0
    for trial in range(trials):
        frames = int(rng.integers(1, 4))
        scenes = [_random_eval_scene(rng) for _ in range(frames)]
        dets = [d for d, _ in scenes]
        gts = [g for _, g in scenes]
        for cls in ("Car", "Pedestrian"):
            for diff in evaluation.DIFFICULTIES:
                try:
                    curve = evaluation.pr_curve(dets, gts, cls, diff, config)
                    got = evaluation.ap_from_curve(curve, config.num_recall_points)
                except evaluation.NoGroundTruthError:
                    got = None
                want = _ap_oracle(dets, gts, cls, diff, config)
                if (got is None) != (want is None):
                    return CheckResult(
                        "ap_bruteforce",
                        False,
                        f"empty-bucket disagreement on trial {trial} {cls}/{diff}",
                        time.perf_counter() - t0,
                    )
                if got is not None:
                    worst = max(worst, abs(got - want))
    passed = worst <= 1e-12
    return CheckResult(
        "ap_bruteforce",
        passed,
        f"{trials} scenes, max |AP - oracle| = {worst:.2e}",
        time.perf_counter() - t0,
    )


def check_rf_impulse(seed: int = 4) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    if dffm.receptive_field([(5, 1, 1)]) != 5 or dffm.receptive_field([(3, 1, 1)] * 2) != 5:
        return CheckResult(
            "rf_impulse", False, "receptive-field recurrence broken", time.perf_counter() - t0
        )
    for n in (1, 2, 3):
        radius = dffm.impulse_support_radius(n, rng)
        if radius != n:
            return CheckResult(
                "rf_impulse",
                False,
                f"{n}-stage impulse support radius {radius}, expected {n}",
                time.perf_counter() - t0,
            )
    return CheckResult(
        "rf_impulse", True, "support radius = stages for n in 1..3", time.perf_counter() - t0
    )


CHECKS = (
    check_dense_equivalence,
    check_gradients,
    check_nms,
    check_ap,
    check_rf_impulse,
)


def run_selfcheck() -> list[CheckResult]:
    return [check() for check in CHECKS]
