"""Point cloud cropping, voxelization, and training-time augmentation.

The detection range is half-open per axis: min <= p < max. Voxel indices are
floor((p - min) / size) and each voxel's feature is the mean of its member
(x, y, z, intensity) rows. When a voxel budget is set, voxels are kept in
first-point-encounter order and the overflow is reported, not fatal.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .geometry import Box3D, contains_points, contains_points_bev, transform_box
from .kitti_io import GroundTruth, PointCloud
from .sparse import SparseTensor
from .synthetic import _boxes_overlap_bev


@dataclass
class VoxelConfig:
    """Detection range and voxel size; grid dims are derived."""

    range_min: tuple[float, float, float] = (0.0, -40.0, -3.0)
    range_max: tuple[float, float, float] = (70.4, 40.0, 1.0)
    voxel_size: tuple[float, float, float] = (0.05, 0.05, 0.1)
    max_voxels: int | None = None

    def __post_init__(self) -> None:
        for lo, hi, size in zip(self.range_min, self.range_max, self.voxel_size):
            if not hi > lo:
                raise ConfigError(f"empty range [{lo}, {hi})")
            if not size > 0:
                raise ConfigError(f"non-positive voxel size {size}")

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        return tuple(
            int(round((hi - lo) / size))
            for lo, hi, size in zip(self.range_min, self.range_max, self.voxel_size)
        )


@dataclass
class VoxelizeReport:
    num_points: int
    num_voxels: int
    dropped_voxels: int = 0
    dropped_points: int = 0

    @property
    def truncated(self) -> bool:
        return self.dropped_voxels > 0

    def to_json_dict(self) -> dict:
        return {
            "num_points": self.num_points,
            "num_voxels": self.num_voxels,
            "dropped_voxels": self.dropped_voxels,
            "dropped_points": self.dropped_points,
            "truncated": self.truncated,
        }


def crop_points(cloud: PointCloud, config: VoxelConfig) -> PointCloud:
    """Keep points with min <= p < max on every axis."""
    lo = np.asarray(config.range_min)
    hi = np.asarray(config.range_max)
    xyz = cloud.xyz
    mask = np.all((xyz >= lo) & (xyz < hi), axis=1)
    return PointCloud(cloud.points[mask])


def voxelize(
    cloud: PointCloud, config: VoxelConfig
) -> tuple[SparseTensor, VoxelizeReport]:
    """Mean-pool cropped points into their voxels.

    Returns the canonical sparse tensor (4 channels: mean x, y, z, intensity)
    plus a report covering any budget truncation.
    """
    cropped = crop_points(cloud, config)
    dims = config.grid_dims
    if len(cropped) == 0:
        return SparseTensor.empty(dims, 4), VoxelizeReport(0, 0)
    lo = np.asarray(config.range_min)
    size = np.asarray(config.voxel_size)
    indices = np.floor((cropped.xyz - lo) / size).astype(np.int64)
    indices = np.minimum(indices, np.asarray(dims) - 1)  # guard the hi-edge float case
    keys = (indices[:, 0] * dims[1] + indices[:, 1]) * dims[2] + indices[:, 2]
    unique_keys, first_pos, inverse = np.unique(
        keys, return_index=True, return_inverse=True
    )
    dropped_voxels = 0
    dropped_points = 0
    keep_unique = np.arange(unique_keys.shape[0])
    if config.max_voxels is not None and unique_keys.shape[0] > config.max_voxels:
        encounter_order = np.argsort(first_pos, kind="stable")
        keep_unique = np.sort(encounter_order[: config.max_voxels])
        dropped_voxels = unique_keys.shape[0] - config.max_voxels
        point_kept = np.isin(inverse, keep_unique)
        dropped_points = int((~point_kept).sum())
    # Mean of member rows per kept voxel, accumulated in point order.
    sums = np.zeros((unique_keys.shape[0], 4))
    np.add.at(sums, inverse, cropped.points)
    counts = np.bincount(inverse, minlength=unique_keys.shape[0])
    means = sums[keep_unique] / counts[keep_unique, None]
    kept_keys = unique_keys[keep_unique]
    coords = np.stack(
        [
            kept_keys // (dims[1] * dims[2]),
            (kept_keys // dims[2]) % dims[1],
            kept_keys % dims[2],
        ],
        axis=1,
    )
    tensor = SparseTensor(dims, coords, means)  # unique keys are sorted: canonical
    report = VoxelizeReport(
        num_points=len(cropped),
        num_voxels=tensor.num_active,
        dropped_voxels=dropped_voxels,
        dropped_points=dropped_points,
    )
    return tensor, report


# ---------------------------------------------------------------------------
# Augmentation.


@dataclass
class AugmentConfig:
    enabled: bool = False
    flip_prob: float = 0.5
    rotation_range: tuple[float, float] = (-np.pi / 4.0, np.pi / 4.0)
    scale_range: tuple[float, float] = (0.95, 1.05)
    gt_sample_count: int = 0


def apply_transform(
    cloud: PointCloud,
    gts: list[GroundTruth],
    flip: bool,
    rotation: float,
    scale: float,
) -> tuple[PointCloud, list[GroundTruth]]:
    """Apply a fixed flip/rotation/scale to points and boxes (in that order)."""
    pts = cloud.points.copy()
    if flip:
        pts[:, 1] = -pts[:, 1]
    if rotation != 0.0:
        c, s = np.cos(rotation), np.sin(rotation)
        x = pts[:, 0] * c - pts[:, 1] * s
        y = pts[:, 0] * s + pts[:, 1] * c
        pts[:, 0] = x
        pts[:, 1] = y
    pts[:, :3] *= scale
    new_gts = []
    for gt in gts:
        box = transform_box(gt.box3d_lidar, flip_y=flip, rotation=rotation, scale=scale)
        l, w, h = box.dims
        x, y, z = box.center
        new_gts.append(
            replace(
                gt,
                dims_hwl=(h, w, l),
                location=(x, y, z - 0.5 * h),
                rotation_y=box.yaw,
                box3d_lidar=box,
            )
        )
    return PointCloud(pts), new_gts


def augment(
    cloud: PointCloud,
    gts: list[GroundTruth],
    rng: np.random.Generator,
    config: AugmentConfig,
) -> tuple[PointCloud, list[GroundTruth]]:
    """Random flip, global z-rotation, and global scale, driven by `rng`."""
    flip = bool(rng.random() < config.flip_prob)
    rotation = float(rng.uniform(*config.rotation_range))
    scale = float(rng.uniform(*config.scale_range))
    return apply_transform(cloud, gts, flip, rotation, scale)


# ---------------------------------------------------------------------------
# Ground-truth sampling from a donor database.


@dataclass
class GtSample:
    """One donor: its box annotation and the points inside the box."""

    ground_truth: GroundTruth
    points: np.ndarray  # (M, 4)


def build_gt_database(
    scenes: list[tuple[PointCloud, list[GroundTruth]]]
) -> list[GtSample]:
    """Collect every annotated box with its member points from the scenes."""
    db = []
    for cloud, gts in scenes:
        for gt in gts:
            if gt.box3d_lidar is None or gt.class_name in ("DontCare", "Other"):
                continue
            mask = contains_points(gt.box3d_lidar, cloud.xyz)
            db.append(GtSample(ground_truth=gt, points=cloud.points[mask]))
    return db


def gt_sample(
    cloud: PointCloud,
    gts: list[GroundTruth],
    database: list[GtSample],
    rng: np.random.Generator,
    config: AugmentConfig,
    voxel_config: VoxelConfig,
    max_tries: int = 40,
) -> tuple[PointCloud, list[GroundTruth]]:
    """Paste up to gt_sample_count donor boxes at random collision-free poses.

    Collision checks run against boxes only (existing plus already inserted);
    host points under an accepted footprint are removed before insertion.
    """
    if config.gt_sample_count <= 0 or not database:
        return cloud, gts
    lo = np.asarray(voxel_config.range_min)
    hi = np.asarray(voxel_config.range_max)
    boxes = [g.box3d_lidar for g in gts if g.box3d_lidar is not None]
    points = cloud.points
    new_gts = list(gts)
    order = rng.permutation(len(database))
    inserted = 0
    for db_index in order:
        if inserted >= config.gt_sample_count:
            break
        donor = database[db_index]
        base = donor.ground_truth.box3d_lidar
        placed = None
        for _ in range(max_tries):
            margin_xy = 0.5 * float(np.hypot(base.dims[0], base.dims[1])) + 0.05
            margin_z = 0.5 * base.dims[2] + 0.02
            margins = np.array([margin_xy, margin_xy, margin_z])
            if np.any(hi - lo <= 2 * margins):
                break
            center = rng.uniform(lo + margins, hi - margins)
            yaw = float(rng.uniform(-np.pi, np.pi))
            candidate = Box3D(center, base.dims.copy(), yaw)
            if not any(_boxes_overlap_bev(candidate, b) for b in boxes):
                placed = candidate
                break
        if placed is None:
            continue
        # Clear host points under the new footprint, then move the donor points.
        keep = ~contains_points_bev(placed, points[:, :2])
        points = points[keep]
        moved = donor.points.copy()
        rel = moved[:, :3] - base.center
        delta_yaw = placed.yaw - base.yaw
        c, s = np.cos(delta_yaw), np.sin(delta_yaw)
        x = rel[:, 0] * c - rel[:, 1] * s
        y = rel[:, 0] * s + rel[:, 1] * c
        moved[:, 0] = x + placed.center[0]
        moved[:, 1] = y + placed.center[1]
        moved[:, 2] = rel[:, 2] + placed.center[2]
        points = np.vstack([points, moved])
        l, w, h = placed.dims
        x0, y0, z0 = placed.center
        new_gts.append(
            replace(
                donor.ground_truth,
                dims_hwl=(h, w, l),
                location=(x0, y0, z0 - 0.5 * h),
                rotation_y=placed.yaw,
                box3d_lidar=placed,
            )
        )
        boxes.append(placed)
        inserted += 1
    return PointCloud(points), new_gts
