"""Deterministic synthetic LiDAR scenes for the desk-scale pipeline.

A scene is a handful of non-overlapping car-like boxes filled with
surface-biased points (scans hit surfaces, not volumes) plus uniform
background clutter. Everything is driven by one numpy Generator so a seed
fully determines the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GenerationError
from .geometry import Box3D, bev_corners, rotation2d
from .kitti_io import GroundTruth, PointCloud

_MAX_TRIES_PER_BOX = 200

# Face order: -x, +x, -y, +y, -z, +z in the box frame.
_FACE_AXES = np.array([0, 0, 1, 1, 2, 2])
_FACE_SIGNS = np.array([-1.0, 1.0, -1.0, 1.0, -1.0, 1.0])


@dataclass
class SceneConfig:
    """Knobs for one synthetic frame."""

    range_min: tuple[float, float, float] = (0.0, -6.4, -2.0)
    range_max: tuple[float, float, float] = (12.8, 6.4, 1.2)
    num_boxes: int = 3
    points_per_box: int = 150
    noise_points: int = 200
    seed: int = 0


def _sample_dims(rng: np.random.Generator, extent: np.ndarray) -> np.ndarray:
    # Car-like proportions scaled to the configured range.
    plane = min(extent[0], extent[1])
    length = rng.uniform(0.18, 0.30) * plane
    width = length * rng.uniform(0.42, 0.55)
    height = min(rng.uniform(1.2, 1.8), 0.7 * extent[2])
    return np.array([length, width, height])


def _boxes_overlap_bev(a: Box3D, b: Box3D) -> bool:
    # Cheap exact test via separating axes of both rectangles.
    ca, cb = bev_corners(a), bev_corners(b)
    for corners in (ca, cb):
        for i in range(4):
            edge = corners[(i + 1) % 4] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _place_boxes(cfg: SceneConfig, rng: np.random.Generator) -> list[Box3D]:
    lo = np.asarray(cfg.range_min, dtype=np.float64)
    hi = np.asarray(cfg.range_max, dtype=np.float64)
    extent = hi - lo
    boxes: list[Box3D] = []
    for _ in range(cfg.num_boxes):
        placed = False
        for _ in range(_MAX_TRIES_PER_BOX):
            dims = _sample_dims(rng, extent)
            margin_xy = 0.5 * np.hypot(dims[0], dims[1]) + 0.05
            margin_z = 0.5 * dims[2] + 0.02
            margins = np.array([margin_xy, margin_xy, margin_z])
            if np.any(hi - lo <= 2 * margins):
                continue
            center = rng.uniform(lo + margins, hi - margins)
            yaw = rng.uniform(-np.pi, np.pi)
            candidate = Box3D(center, dims, yaw)
            if not any(_boxes_overlap_bev(candidate, b) for b in boxes):
                boxes.append(candidate)
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place box {len(boxes) + 1}/{cfg.num_boxes} "
                f"without overlap in range {cfg.range_min}..{cfg.range_max}"
            )
    return boxes


def _sample_box_points(box: Box3D, count: int, rng: np.random.Generator) -> np.ndarray:
    """Surface-biased interior samples: pick a face by area, pull inward a bit."""
    half = 0.5 * box.dims
    areas = np.array(
        [
            box.dims[1] * box.dims[2],
            box.dims[1] * box.dims[2],
            box.dims[0] * box.dims[2],
            box.dims[0] * box.dims[2],
            box.dims[0] * box.dims[1],
            box.dims[0] * box.dims[1],
        ]
    )
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    local = rng.uniform(-1.0, 1.0, size=(count, 3)) * half
    depth = rng.uniform(0.05, 0.5, size=count)
    axis = _FACE_AXES[faces]
    rows = np.arange(count)
    local[rows, axis] = _FACE_SIGNS[faces] * half[axis] * (1.0 - depth)
    world = local.copy()
    world[:, :2] = local[:, :2] @ rotation2d(box.yaw).T
    return world + box.center


def _ground_truth_for(box: Box3D) -> GroundTruth:
    # Plausible 2D box height from a pinhole-ish fall-off with distance; keeps
    # difficulty bucketing exercisable without an actual camera.
    dist = max(float(np.hypot(box.center[0], box.center[1])), 1.0)
    height_px = float(np.clip(600.0 * box.dims[2] / dist, 5.0, 300.0))
    width_px = height_px * box.dims[0] / box.dims[2]
    l, w, h = box.dims
    x, y, z = box.center
    return GroundTruth(
        class_name="Car",
        truncated=0.0,
        occluded=0,
        alpha=0.0,
        bbox2d=(100.0, 100.0, 100.0 + width_px, 100.0 + height_px),
        dims_hwl=(h, w, l),
        location=(x, y, z - 0.5 * h),
        rotation_y=box.yaw,
        box3d_lidar=box,
    )


def gen_synthetic_scene(cfg: SceneConfig) -> tuple[PointCloud, list[GroundTruth]]:
    """Generate one frame: surface-sampled boxes plus uniform background noise.

    Raises GenerationError when the requested boxes cannot be placed without
    BEV overlap inside the range.
    """
    rng = np.random.default_rng(cfg.seed)
    boxes = _place_boxes(cfg, rng)
    chunks = []
    for box in boxes:
        xyz = _sample_box_points(box, cfg.points_per_box, rng)
        intensity = rng.uniform(0.0, 1.0, size=(cfg.points_per_box, 1))
        chunks.append(np.hstack([xyz, intensity]))
    if cfg.noise_points:
        lo = np.asarray(cfg.range_min)
        hi = np.asarray(cfg.range_max)
        xyz = rng.uniform(lo, hi, size=(cfg.noise_points, 3))
        intensity = rng.uniform(0.0, 1.0, size=(cfg.noise_points, 1))
        chunks.append(np.hstack([xyz, intensity]))
    points = np.vstack(chunks) if chunks else np.zeros((0, 4))
    return PointCloud(points), [_ground_truth_for(b) for b in boxes]


def gen_scene_batch(cfg: SceneConfig, count: int) -> list[tuple[PointCloud, list[GroundTruth]]]:
    """Generate `count` frames with seeds cfg.seed, cfg.seed+1, ..."""
    out = []
    for i in range(count):
        frame_cfg = SceneConfig(
            range_min=cfg.range_min,
            range_max=cfg.range_max,
            num_boxes=cfg.num_boxes,
            points_per_box=cfg.points_per_box,
            noise_points=cfg.noise_points,
            seed=cfg.seed + i,
        )
        out.append(gen_synthetic_scene(frame_cfg))
    return out
