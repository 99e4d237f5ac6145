"""End-to-end toy pipeline: voxels -> sparse backbone -> BEV head -> boxes.

The backbone is four stages of submanifold residual blocks; stages 2-4 are
entered through a stride-2 sparse convolution, so the final feature map sits
at 1/8 of the voxel resolution. Dynamic fusion blocks can be inserted after
any stage's residual block, and the voxel filter (when enabled) halves the
active set right before height compression and the BEV head.

Training runs single-frame steps of Adam on focal + smooth-L1 detection loss,
plus the importance supervision term when the filter is on. All randomness
flows through explicit seeds; two runs with the same seed produce identical
loss curves and detections.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from math import ceil

import numpy as np

from . import autodiff as ad
from .autodiff import AdamConfig, Node, Tape, adam_step, init_adam
from .convs import ConvParams, init_conv
from .detector import (
    CellGrid,
    HeadParams,
    detection_loss_nodes,
    decode_boxes,
    head_nodes,
    head_param_arrays,
    init_head,
    nms_bev,
)
from .dffm import DffmParams, dffm_nodes, dffm_param_arrays, init_dffm
from .errors import ConfigError, DivergedLossError, ShapeMismatchError
from .evaluation import EvalConfig, EvalResult, evaluate
from .fsm import (
    FsmParams,
    fsm_param_arrays,
    fsm_targets,
    importance_nodes,
    init_fsm,
    topk_rows,
)
from .geometry import Box3D, Detection
from .kitti_io import GroundTruth, PointCloud
from .sparse import Rulebook, SparseTensor, build_rulebook
from .synthetic import SceneConfig, gen_scene_batch
from .voxelizer import AugmentConfig, VoxelConfig, augment, voxelize

NUM_STAGES = 4
TOTAL_STRIDE = 8  # three stride-2 downsamplings
IN_CHANNELS = 4  # mean x, y, z, intensity


@dataclass
class DffmConfig:
    stages: tuple[int, ...] = (2, 3)
    target_rf: int = 5

    def __post_init__(self) -> None:
        bad = [s for s in self.stages if not 1 <= s <= NUM_STAGES]
        if bad:
            raise ConfigError(f"fusion stages out of range 1..{NUM_STAGES}: {bad}")


@dataclass
class FsmConfig:
    enabled: bool = False
    keep_ratio: float = 0.5
    lambda_imp: float = 10.0
    alpha_f: float = 0.25
    gamma_f: float = 2.0
    hidden: int = 16


@dataclass
class HeadConfig:
    hidden: int = 32
    score_threshold: float = 0.3
    nms_iou: float = 0.3


@dataclass
class BackboneConfig:
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    activation: str = "silu"

    def __post_init__(self) -> None:
        if len(self.widths) != NUM_STAGES:
            raise ConfigError(f"expected {NUM_STAGES} stage widths, got {self.widths}")


@dataclass
class TrainConfig:
    steps: int = 300
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 25

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"training needs at least one step, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


@dataclass
class DataConfig:
    frames: int = 8
    num_boxes: int = 3
    points_per_box: int = 150
    noise_points: int = 200
    seed: int = 0


@dataclass
class RunConfig:
    """One experiment: geometry, model shape, training, and evaluation."""

    voxel: VoxelConfig = field(
        default_factory=lambda: VoxelConfig(
            range_min=(0.0, -6.4, -2.0),
            range_max=(12.8, 6.4, 1.2),
            voxel_size=(0.1, 0.1, 0.2),
        )
    )
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    dffm: DffmConfig = field(default_factory=DffmConfig)
    fsm: FsmConfig = field(default_factory=FsmConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def scene_config(self, seed: int | None = None) -> SceneConfig:
        return SceneConfig(
            range_min=self.voxel.range_min,
            range_max=self.voxel.range_max,
            num_boxes=self.data.num_boxes,
            points_per_box=self.data.points_per_box,
            noise_points=self.data.noise_points,
            seed=self.data.seed if seed is None else seed,
        )


@dataclass
class StageParams:
    down: ConvParams | None
    res1: ConvParams
    res2: ConvParams
    dffm: DffmParams | None


@dataclass
class ModelParams:
    entry: ConvParams
    stages: list[StageParams]
    fsm: FsmParams | None
    head: HeadParams


def init_model(config: RunConfig, rng: np.random.Generator) -> ModelParams:
    widths = config.backbone.widths
    act = config.backbone.activation
    entry = init_conv(rng, 3, IN_CHANNELS, widths[0])
    stages = []
    for i in range(NUM_STAGES):
        down = None
        if i > 0:
            down = init_conv(rng, 3, widths[i - 1], widths[i], stride=2, mode="strided")
        res1 = init_conv(rng, 3, widths[i], widths[i])
        res2 = init_conv(rng, 3, widths[i], widths[i])
        fusion = None
        if (i + 1) in config.dffm.stages:
            fusion = init_dffm(rng, widths[i], config.dffm.target_rf, act)
        stages.append(StageParams(down=down, res1=res1, res2=res2, dffm=fusion))
    filt = init_fsm(rng, widths[-1], config.fsm.hidden) if config.fsm.enabled else None
    nz_final = ceil(config.voxel.grid_dims[2] / TOTAL_STRIDE)
    head = init_head(rng, widths[-1] * nz_final, config.head.hidden)
    return ModelParams(entry=entry, stages=stages, fsm=filt, head=head)


def param_arrays(model: ModelParams) -> dict[str, np.ndarray]:
    """Flat name -> array view of every trainable tensor (shared storage)."""
    out: dict[str, np.ndarray] = {"entry.w": model.entry.weights}
    for i, stage in enumerate(model.stages, start=1):
        if stage.down is not None:
            out[f"stage{i}.down.w"] = stage.down.weights
        out[f"stage{i}.res1.w"] = stage.res1.weights
        out[f"stage{i}.res2.w"] = stage.res2.weights
        if stage.dffm is not None:
            out.update(dffm_param_arrays(stage.dffm, prefix=f"stage{i}.dffm"))
    if model.fsm is not None:
        out.update(fsm_param_arrays(model.fsm, prefix="fsm"))
    out.update(head_param_arrays(model.head, prefix="head"))
    return out


def save_checkpoint(path, model: ModelParams) -> None:
    payload = {
        name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
        for name, arr in param_arrays(model).items()
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path, model: ModelParams) -> None:
    """Copy stored values into the model's arrays; shapes must match."""
    with open(path) as fh:
        payload = json.load(fh)
    arrays = param_arrays(model)
    missing = set(arrays) - set(payload)
    extra = set(payload) - set(arrays)
    if missing or extra:
        raise ShapeMismatchError(
            f"checkpoint does not match model: missing {sorted(missing)}, extra {sorted(extra)}"
        )
    for name, arr in arrays.items():
        stored = np.asarray(payload[name]["values"], dtype=np.float64)
        shape = tuple(payload[name]["shape"])
        if shape != arr.shape:
            raise ShapeMismatchError(f"{name}: checkpoint {shape} vs model {arr.shape}")
        np.copyto(arr, stored.reshape(shape))


# ---------------------------------------------------------------------------
# Structure plan: rulebooks depend only on coordinates, so they are reusable
# across steps whenever the active set is unchanged.


@dataclass
class StagePlan:
    rb_down: Rulebook | None
    rb3: Rulebook
    coords: np.ndarray
    grid_dims: tuple[int, int, int]


@dataclass
class ForwardPlan:
    stages: list[StagePlan]

    @property
    def final(self) -> StagePlan:
        return self.stages[-1]


def _structure(coords: np.ndarray, grid_dims: tuple[int, int, int]) -> SparseTensor:
    return SparseTensor(grid_dims, coords, np.zeros((coords.shape[0], 1)))


def build_plan(voxels: SparseTensor) -> ForwardPlan:
    stages = []
    coords = voxels.coords
    grid = voxels.grid_dims
    for i in range(NUM_STAGES):
        rb_down = None
        if i > 0:
            rb_down = build_rulebook(_structure(coords, grid), 3, stride=2, mode="strided")
            coords = rb_down.out_coords
            grid = rb_down.out_grid_dims
        rb3 = build_rulebook(_structure(coords, grid), 3)
        stages.append(StagePlan(rb_down=rb_down, rb3=rb3, coords=coords, grid_dims=grid))
    return ForwardPlan(stages=stages)


@dataclass
class ForwardOut:
    """Tape-level pipeline outputs plus bookkeeping for losses and timing."""

    cls_logits: Node
    reg: Node
    cells: np.ndarray
    grid: CellGrid
    importance: Node | None
    final_coords: np.ndarray
    final_grid_dims: tuple[int, int, int]
    head_coords: np.ndarray
    site_counts: dict[str, int]


def cell_grid_for(config: RunConfig) -> CellGrid:
    dims = config.voxel.grid_dims
    shape = (ceil(dims[0] / TOTAL_STRIDE), ceil(dims[1] / TOTAL_STRIDE))
    return CellGrid(
        origin=(config.voxel.range_min[0], config.voxel.range_min[1]),
        cell_size=(
            config.voxel.voxel_size[0] * TOTAL_STRIDE,
            config.voxel.voxel_size[1] * TOTAL_STRIDE,
        ),
        shape=shape,
        z_ref=0.5 * (config.voxel.range_min[2] + config.voxel.range_max[2]),
    )


def _occupied_cells(coords: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if coords.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64)
    ids = np.unique(coords[:, 0] * shape[1] + coords[:, 1])
    return np.stack([ids // shape[1], ids % shape[1]], axis=1).astype(np.int64)


def backbone_nodes(
    tape: Tape,
    voxels: SparseTensor,
    config: RunConfig,
    model: ModelParams,
    plan: ForwardPlan,
) -> tuple[Node, dict[str, int]]:
    """Entry conv plus the four residual stages, fusion blocks included."""
    if voxels.channels != IN_CHANNELS:
        raise ShapeMismatchError(f"expected {IN_CHANNELS} voxel channels, got {voxels.channels}")
    act = config.backbone.activation
    h = tape.const(voxels.features)
    site_counts: dict[str, int] = {}
    for i, (stage_params, stage_plan) in enumerate(zip(model.stages, plan.stages), start=1):
        if stage_params.down is not None:
            w = tape.param(f"stage{i}.down.w", stage_params.down.weights)
            h = ad.activation(act, ad.sparse_conv(h, w, None, stage_plan.rb_down))
        elif i == 1:
            w = tape.param("entry.w", model.entry.weights)
            h = ad.activation(act, ad.sparse_conv(h, w, None, stage_plan.rb3))
        w1 = tape.param(f"stage{i}.res1.w", stage_params.res1.weights)
        r = ad.activation(act, ad.sparse_conv(h, w1, None, stage_plan.rb3))
        w2 = tape.param(f"stage{i}.res2.w", stage_params.res2.weights)
        r = ad.sparse_conv(r, w2, None, stage_plan.rb3)
        h = ad.activation(act, ad.add(h, r))
        if stage_params.dffm is not None:
            h = dffm_nodes(tape, h, stage_plan.rb3, stage_params.dffm, prefix=f"stage{i}.dffm")
        site_counts[f"stage{i}"] = stage_plan.coords.shape[0]
    return h, site_counts


def select_nodes(
    tape: Tape,
    h: Node,
    config: RunConfig,
    model: ModelParams,
    plan: ForwardPlan,
    use_fsm: bool,
) -> tuple[Node, np.ndarray, Node | None]:
    """Optionally filter the final active set down to the top importance rows."""
    coords = plan.final.coords
    if not use_fsm:
        return h, coords, None
    if model.fsm is None:
        raise ConfigError("voxel filter enabled but the model carries no filter params")
    importance = importance_nodes(tape, h, plan.final.rb3, model.fsm, prefix="fsm")
    kept = topk_rows(importance.value[:, 0], config.fsm.keep_ratio)
    h = ad.mul(ad.take_rows(h, kept), ad.take_rows(importance, kept))
    return h, coords[kept], importance


def head_part(
    tape: Tape,
    h: Node,
    coords: np.ndarray,
    config: RunConfig,
    model: ModelParams,
    plan: ForwardPlan,
) -> tuple[Node, Node, np.ndarray, CellGrid]:
    """Height compression and the detection head at occupied cells only."""
    grid = cell_grid_for(config)
    bev = ad.bev_scatter(h, coords, plan.final.grid_dims)
    cells = _occupied_cells(coords, grid.shape)
    cls_logits, reg, cells = head_nodes(tape, bev, model.head, cells)
    return cls_logits, reg, cells, grid


def forward_nodes(
    tape: Tape,
    voxels: SparseTensor,
    config: RunConfig,
    model: ModelParams,
    plan: ForwardPlan | None = None,
    fsm_enabled: bool | None = None,
) -> ForwardOut:
    """Run the full differentiable pipeline on one frame's voxels."""
    plan = plan or build_plan(voxels)
    use_fsm = config.fsm.enabled if fsm_enabled is None else fsm_enabled
    h, site_counts = backbone_nodes(tape, voxels, config, model, plan)
    h, coords, importance = select_nodes(tape, h, config, model, plan, use_fsm)
    site_counts["head"] = coords.shape[0]
    cls_logits, reg, cells, grid = head_part(tape, h, coords, config, model, plan)
    return ForwardOut(
        cls_logits=cls_logits,
        reg=reg,
        cells=cells,
        grid=grid,
        importance=importance,
        final_coords=plan.final.coords,
        final_grid_dims=plan.final.grid_dims,
        head_coords=coords,
        site_counts=site_counts,
    )


def head_maps(out: ForwardOut) -> tuple[np.ndarray, np.ndarray]:
    """Dense score/regression maps from the per-cell head outputs."""
    score_map = np.zeros((*out.grid.shape, 1))
    reg_map = np.zeros((*out.grid.shape, 8))
    if out.cells.shape[0]:
        score_map[out.cells[:, 0], out.cells[:, 1], 0] = ad._sigmoid(out.cls_logits.value[:, 0])
        reg_map[out.cells[:, 0], out.cells[:, 1]] = out.reg.value
    return score_map, reg_map


def detections_from_forward(out: ForwardOut, config: RunConfig) -> list[Detection]:
    """Decode + NMS on the per-cell head outputs."""
    if out.cells.shape[0] == 0:
        return []
    score_map, reg_map = head_maps(out)
    dets = decode_boxes(score_map, reg_map, out.grid, config.head.score_threshold)
    return nms_bev(dets, config.head.nms_iou)


def gt_boxes_for_loss(gts: list[GroundTruth]) -> list[Box3D]:
    return [
        g.box3d_lidar
        for g in gts
        if g.box3d_lidar is not None and g.class_name not in ("DontCare", "Other")
    ]


def frame_loss_nodes(
    tape: Tape,
    out: ForwardOut,
    config: RunConfig,
    gts: list[GroundTruth],
) -> tuple[Node, dict[str, float]]:
    """Total loss node plus float components for reporting."""
    boxes = gt_boxes_for_loss(gts)
    total, cls_loss, reg_loss = detection_loss_nodes(
        tape,
        out.cls_logits,
        out.reg,
        out.cells,
        out.grid,
        boxes,
        alpha_f=config.fsm.alpha_f,
        gamma_f=config.fsm.gamma_f,
    )
    parts = {
        "cls": float(cls_loss.value),
        "reg": float(reg_loss.value),
        "imp": 0.0,
    }
    if out.importance is not None and out.final_coords.shape[0]:
        size = np.asarray(config.voxel.voxel_size) * TOTAL_STRIDE
        labels = fsm_targets(
            out.final_coords, np.asarray(config.voxel.range_min), size, boxes
        )
        imp_loss = ad.focal_loss_nodes(
            out.importance, labels[:, None], config.fsm.alpha_f, config.fsm.gamma_f
        )
        parts["imp"] = float(imp_loss.value)
        total = ad.add(total, ad.scale(imp_loss, config.fsm.lambda_imp))
    parts["total"] = float(total.value)
    return total, parts


@dataclass
class TrainReport:
    steps: list[dict]
    wall_seconds: float
    config_seed: int

    @property
    def initial_loss(self) -> float:
        return self.steps[0]["total"]

    @property
    def final_loss(self) -> float:
        return self.steps[-1]["total"]

    def to_json_dict(self) -> dict:
        return {
            "num_steps": len(self.steps),
            "wall_seconds": self.wall_seconds,
            "seed": self.config_seed,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "steps": self.steps,
        }


def train_toy(
    scenes: list[tuple[PointCloud, list[GroundTruth]]],
    config: RunConfig,
    model: ModelParams | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Adam over single-frame steps, cycling the scene list in order.

    Frame structure (voxels and rulebooks) is cached per scene while
    augmentation is off; with augmentation on, geometry changes every step
    and is rebuilt. Raises DivergedLossError if the loss goes non-finite.
    """
    if not scenes:
        raise ConfigError("training requires at least one scene")
    rng = np.random.default_rng(config.train.seed)
    aug_rng = np.random.default_rng(config.train.seed + 1)
    if model is None:
        model = init_model(config, rng)
    params = param_arrays(model)
    adam = init_adam(
        params,
        AdamConfig(
            lr=config.train.lr,
            beta1=config.train.beta1,
            beta2=config.train.beta2,
            weight_decay=config.train.weight_decay,
        ),
    )
    cache: dict[int, tuple[SparseTensor, ForwardPlan]] = {}
    steps = []
    t_start = time.perf_counter()
    for step in range(config.train.steps):
        scene_index = step % len(scenes)
        cloud, gts = scenes[scene_index]
        if config.augment.enabled:
            cloud, gts = augment(cloud, gts, aug_rng, config.augment)
            voxels, _ = voxelize(cloud, config.voxel)
            plan = build_plan(voxels)
        elif scene_index in cache:
            voxels, plan = cache[scene_index]
        else:
            voxels, _ = voxelize(cloud, config.voxel)
            plan = build_plan(voxels)
            cache[scene_index] = (voxels, plan)
        tape = Tape()
        out = forward_nodes(tape, voxels, config, model, plan=plan)
        total, parts = frame_loss_nodes(tape, out, config, gts)
        if not np.isfinite(parts["total"]):
            raise DivergedLossError(f"loss became {parts['total']} at step {step}")
        grads = tape.backward(total)
        adam_step(adam, params, grads)
        steps.append({"step": step, **parts})
    report = TrainReport(
        steps=steps,
        wall_seconds=time.perf_counter() - t_start,
        config_seed=config.train.seed,
    )
    return model, report


# ---------------------------------------------------------------------------
# Timed inference.


@dataclass
class TimingReport:
    """Per-frame wall-clock phases (ms) and site statistics."""

    frames: list[dict]
    warmup: int

    PHASES = ("voxelize", "backbone", "fsm", "head_nms")

    def mean(self, key: str) -> float:
        if not self.frames:
            return 0.0
        return float(np.mean([f[key] for f in self.frames]))

    def to_json_dict(self) -> dict:
        return {
            "num_frames": len(self.frames),
            "warmup": self.warmup,
            "mean_total_ms": self.mean("total_ms"),
            "mean_phase_ms": {p: self.mean(f"{p}_ms") for p in self.PHASES},
            "frames": self.frames,
        }


def run_frame(
    cloud: PointCloud,
    config: RunConfig,
    model: ModelParams,
    fsm_enabled: bool | None = None,
) -> tuple[list[Detection], dict]:
    """One frame through the pipeline with per-phase timing."""
    use_fsm = config.fsm.enabled if fsm_enabled is None else fsm_enabled
    t0 = time.perf_counter()
    voxels, _ = voxelize(cloud, config.voxel)
    t1 = time.perf_counter()
    plan = build_plan(voxels)
    tape = Tape()
    h, _ = backbone_nodes(tape, voxels, config, model, plan)
    t2 = time.perf_counter()
    h, coords, _ = select_nodes(tape, h, config, model, plan, use_fsm)
    t3 = time.perf_counter()
    cls_logits, reg, cells, grid = head_part(tape, h, coords, config, model, plan)
    out = ForwardOut(
        cls_logits=cls_logits,
        reg=reg,
        cells=cells,
        grid=grid,
        importance=None,
        final_coords=plan.final.coords,
        final_grid_dims=plan.final.grid_dims,
        head_coords=coords,
        site_counts={},
    )
    if cells.shape[0]:
        score_map, reg_map = head_maps(out)
        raw = decode_boxes(score_map, reg_map, grid, config.head.score_threshold)
    else:
        raw = []
    detections = nms_bev(raw, config.head.nms_iou)
    t4 = time.perf_counter()

    stats = {
        "voxelize_ms": (t1 - t0) * 1e3,
        "backbone_ms": (t2 - t1) * 1e3,
        "fsm_ms": (t3 - t2) * 1e3,
        "head_nms_ms": (t4 - t3) * 1e3,
        "total_ms": (t4 - t0) * 1e3,
        "sites_final": int(plan.final.coords.shape[0]),
        "sites_head": int(coords.shape[0]),
        "cells_head": int(cells.shape[0]),
        "boxes_pre_nms": len(raw),
        "num_detections": len(detections),
    }
    return detections, stats


def infer_timed(
    frames: list[PointCloud],
    config: RunConfig,
    model: ModelParams,
    warmup: int = 3,
    fsm_enabled: bool | None = None,
    threads: int = 1,
    timing: bool = True,
) -> tuple[list[list[Detection]], TimingReport]:
    """Run every frame; the first `warmup` frames are excluded from the report.

    Timing mode is strictly serial. With timing off and threads > 1, frames
    run in a thread pool (frames are independent; output order is preserved).
    """
    results: list[tuple[list[Detection], dict]] = []
    if not timing and threads > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(lambda f: run_frame(f, config, model, fsm_enabled), frames)
            )
    else:
        results = [run_frame(f, config, model, fsm_enabled) for f in frames]
    detections = [dets for dets, _ in results]
    stat_frames = [stats for _, stats in results[warmup:]]
    return detections, TimingReport(frames=stat_frames, warmup=min(warmup, len(frames)))


# ---------------------------------------------------------------------------
# Evaluation over synthetic suites and the sweep harnesses.


def evaluate_model(
    scenes: list[tuple[PointCloud, list[GroundTruth]]],
    config: RunConfig,
    model: ModelParams,
    fsm_enabled: bool | None = None,
) -> tuple[EvalResult, list[list[Detection]]]:
    clouds = [cloud for cloud, _ in scenes]
    detections, _ = infer_timed(
        clouds, config, model, warmup=0, fsm_enabled=fsm_enabled, timing=False
    )
    gts = [gt for _, gt in scenes]
    return evaluate(detections, gts, config.eval), detections


def run_dffm_stage_sweep(
    config: RunConfig,
    train_scenes: list[tuple[PointCloud, list[GroundTruth]]],
    eval_scenes: list[tuple[PointCloud, list[GroundTruth]]],
) -> dict[int, EvalResult]:
    """Train and evaluate once per single-stage fusion placement {1},{2},{3},{4}."""
    results: dict[int, EvalResult] = {}
    for stage in range(1, NUM_STAGES + 1):
        cfg = _clone_config(config, dffm_stages=(stage,))
        model, _ = train_toy(train_scenes, cfg)
        results[stage], _ = evaluate_model(eval_scenes, cfg, model)
    return results


def run_fsm_sweep(
    config: RunConfig,
    train_scenes: list[tuple[PointCloud, list[GroundTruth]]],
    eval_scenes: list[tuple[PointCloud, list[GroundTruth]]],
    keep_ratios: tuple[float, ...] = (0.3, 0.5, 0.7),
    lambdas: tuple[float, ...] = (5.0, 10.0, 15.0),
) -> dict[tuple[float, float], EvalResult]:
    """Train and evaluate over the (keep ratio, supervision weight) grid."""
    results: dict[tuple[float, float], EvalResult] = {}
    for ratio in keep_ratios:
        for lam in lambdas:
            cfg = _clone_config(config, fsm_enabled=True, keep_ratio=ratio, lambda_imp=lam)
            model, _ = train_toy(train_scenes, cfg)
            results[(ratio, lam)], _ = evaluate_model(eval_scenes, cfg, model)
    return results


def _clone_config(
    config: RunConfig,
    dffm_stages: tuple[int, ...] | None = None,
    fsm_enabled: bool | None = None,
    keep_ratio: float | None = None,
    lambda_imp: float | None = None,
) -> RunConfig:
    dffm = config.dffm if dffm_stages is None else replace(config.dffm, stages=dffm_stages)
    fsm_cfg = config.fsm
    if fsm_enabled is not None:
        fsm_cfg = replace(fsm_cfg, enabled=fsm_enabled)
    if keep_ratio is not None:
        fsm_cfg = replace(fsm_cfg, keep_ratio=keep_ratio)
    if lambda_imp is not None:
        fsm_cfg = replace(fsm_cfg, lambda_imp=lambda_imp)
    return replace(config, dffm=dffm, fsm=fsm_cfg)


def make_suite(config: RunConfig, frames: int, seed: int) -> list[tuple[PointCloud, list[GroundTruth]]]:
    """Deterministic batch of synthetic frames for training or evaluation."""
    scene_cfg = config.scene_config(seed=seed)
    return gen_scene_batch(scene_cfg, frames)
