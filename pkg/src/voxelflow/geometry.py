"""Oriented 3D boxes and the point/box predicates shared across the pipeline.

Boxes live in the LiDAR frame: x forward, y left, z up. A box is stored by its
geometric center, (length, width, height) along its local axes, and a yaw
rotation about +z. Yaw is normalized to [-pi, pi).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")
NEUTRAL_CLASSES = ("DontCare", "Other")


def normalize_angle(angle: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    return float((angle + np.pi) % (2.0 * np.pi) - np.pi)


@dataclass
class Box3D:
    """Axis-aligned-in-z oriented box: center, (l, w, h) extents, yaw about z."""

    center: np.ndarray
    dims: np.ndarray  # (l, w, h), meters
    yaw: float

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if np.any(self.dims < 0):
            raise ValueError(f"negative box dims {self.dims}")
        self.yaw = normalize_angle(float(self.yaw))

    @property
    def volume(self) -> float:
        return float(self.dims[0] * self.dims[1] * self.dims[2])

    @property
    def bev_area(self) -> float:
        return float(self.dims[0] * self.dims[1])

    @property
    def z_interval(self) -> tuple[float, float]:
        half = 0.5 * self.dims[2]
        return float(self.center[2] - half), float(self.center[2] + half)


def rotation2d(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def bev_corners(box: Box3D) -> np.ndarray:
    """Return the 4 BEV footprint corners, counter-clockwise, shape (4, 2)."""
    half_l, half_w = 0.5 * box.dims[0], 0.5 * box.dims[1]
    local = np.array(
        [[half_l, half_w], [-half_l, half_w], [-half_l, -half_w], [half_l, -half_w]],
        dtype=np.float64,
    )
    return local @ rotation2d(box.yaw).T + box.center[:2]


def contains_points(box: Box3D, points: np.ndarray) -> np.ndarray:
    """Boolean mask of points inside the box; points exactly on a face count.

    `points` is (N, 3) in the LiDAR frame.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rel = points - box.center
    xy = rel[:, :2] @ rotation2d(-box.yaw).T
    half = 0.5 * box.dims
    return (
        (np.abs(xy[:, 0]) <= half[0])
        & (np.abs(xy[:, 1]) <= half[1])
        & (np.abs(rel[:, 2]) <= half[2])
    )


def contains_points_bev(box: Box3D, points_xy: np.ndarray) -> np.ndarray:
    """Boolean mask of 2D points inside the box BEV footprint (faces inclusive)."""
    points_xy = np.asarray(points_xy, dtype=np.float64).reshape(-1, 2)
    rel = points_xy - box.center[:2]
    xy = rel @ rotation2d(-box.yaw).T
    half = 0.5 * box.dims[:2]
    return (np.abs(xy[:, 0]) <= half[0]) & (np.abs(xy[:, 1]) <= half[1])


def transform_box(
    box: Box3D, flip_y: bool = False, rotation: float = 0.0, scale: float = 1.0
) -> Box3D:
    """Apply the augmentation transform (flip about y, then rotate about z, then scale)."""
    center = box.center.copy()
    yaw = box.yaw
    if flip_y:
        center[1] = -center[1]
        yaw = -yaw
    if rotation != 0.0:
        rot = rotation2d(rotation)
        center[:2] = rot @ center[:2]
        yaw = yaw + rotation
    return Box3D(center * scale, box.dims * scale, yaw)


@dataclass
class Detection:
    """A scored box prediction; class_id indexes CLASS_NAMES."""

    box: Box3D
    score: float
    class_id: int = 0

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]
