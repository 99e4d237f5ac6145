"""Readers and writers for KITTI-style point cloud, label, and calib files.

Velodyne scans are packed little-endian float32 (x, y, z, intensity)
quadruples. Label files are whitespace-delimited text with 15 fields per
object (16 with a trailing score for detections). Calibration files carry the
``Tr_velo_to_cam`` (3x4) and ``R0_rect`` (3x3) matrices used to move camera
frame annotations into the LiDAR frame.

Label files read without a calibration are interpreted directly in the LiDAR
frame: ``location`` is the box bottom center and ``rotation_y`` the yaw about
+z. That is exactly what :func:`write_detections`/:func:`write_labels` emit,
so synthetic data round-trips without a camera model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import CLASS_NAMES, Box3D, Detection, normalize_angle

_POINT_BYTES = 16  # four little-endian float32 per point

KNOWN_CLASSES = ("Car", "Pedestrian", "Cyclist", "DontCare")


@dataclass
class PointCloud:
    """An (N, 4) float64 array of x, y, z, intensity rows."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise FormatError(f"point array must be (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise FormatError("point cloud contains NaN or Inf values")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass
class GroundTruth:
    """One label-file row plus the derived LiDAR-frame box.

    Fields mirror the text format: ``dims_hwl`` is (height, width, length) and
    ``location`` is the box bottom center in whichever frame the file used.
    ``box3d_lidar`` is always the LiDAR-frame box with a geometric center.
    """

    class_name: str
    truncated: float
    occluded: int
    alpha: float
    bbox2d: tuple[float, float, float, float]
    dims_hwl: tuple[float, float, float]
    location: tuple[float, float, float]
    rotation_y: float
    score: float | None = None
    box3d_lidar: Box3D | None = None

    def __post_init__(self) -> None:
        if any(d < 0 for d in self.dims_hwl):
            raise FormatError(f"negative box dimensions {self.dims_hwl}")
        left, top, right, bottom = self.bbox2d
        if right < left or bottom < top:
            raise FormatError(f"degenerate 2D bbox {self.bbox2d}")
        self.rotation_y = normalize_angle(self.rotation_y)

    @property
    def bbox_height(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]


def _lidar_box_from_fields(
    location: tuple[float, float, float],
    dims_hwl: tuple[float, float, float],
    rotation_y: float,
) -> Box3D:
    # LiDAR-frame convention: location is the bottom center.
    h, w, l = dims_hwl
    x, y, z = location
    return Box3D(np.array([x, y, z + 0.5 * h]), np.array([l, w, h]), rotation_y)


def read_velodyne_bin(path: str | Path) -> PointCloud:
    """Read a packed float32 velodyne scan.

    Raises FileNotFoundError for a missing file and FormatError when the byte
    length is not a multiple of 16 or the payload contains non-finite values.
    """
    data = Path(path).read_bytes()
    if len(data) % _POINT_BYTES != 0:
        raise FormatError(
            f"{path}: byte length {len(data)} is not a multiple of {_POINT_BYTES}"
        )
    raw = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    if not np.all(np.isfinite(raw)):
        raise FormatError(f"{path}: scan contains NaN or Inf values")
    return PointCloud(raw.astype(np.float64))


def write_velodyne_bin(path: str | Path, cloud: PointCloud) -> None:
    """Write a point cloud in the packed float32 scan layout."""
    Path(path).write_bytes(cloud.points.astype("<f4").tobytes())


def _parse_label_line(fields: list[str], line_no: int, path: str | Path) -> GroundTruth:
    if len(fields) not in (15, 16):
        raise FormatError(
            f"{path}:{line_no}: expected 15 or 16 fields, got {len(fields)}"
        )
    try:
        values = [float(v) for v in fields[1:]]
    except ValueError as exc:
        raise FormatError(f"{path}:{line_no}: non-numeric field ({exc})") from exc
    name = fields[0] if fields[0] in KNOWN_CLASSES else "Other"
    gt = GroundTruth(
        class_name=name,
        truncated=values[0],
        occluded=int(values[1]),
        alpha=values[2],
        bbox2d=tuple(values[3:7]),
        dims_hwl=tuple(values[7:10]),
        location=tuple(values[10:13]),
        rotation_y=values[13],
        score=values[14] if len(values) == 15 else None,
    )
    gt.box3d_lidar = _lidar_box_from_fields(gt.location, gt.dims_hwl, gt.rotation_y)
    return gt


def read_kitti_labels(path: str | Path) -> list[GroundTruth]:
    """Parse a label file into GroundTruth rows.

    Unknown class names map to "Other". Without a calibration the derived
    ``box3d_lidar`` assumes the LiDAR-frame convention described in the module
    docstring; apply :func:`boxes_to_lidar` afterwards for camera-frame files.
    """
    out = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        out.append(_parse_label_line(fields, line_no, path))
    return out


def _format_label_fields(
    class_name: str,
    truncated: float,
    occluded: int,
    alpha: float,
    bbox2d: tuple[float, float, float, float],
    dims_hwl: tuple[float, float, float],
    location: tuple[float, float, float],
    rotation_y: float,
    score: float | None,
) -> str:
    values = [truncated, alpha, *bbox2d, *dims_hwl, *location, rotation_y]
    parts = [class_name, f"{truncated:.2f}", str(int(occluded))]
    parts += [f"{v:.2f}" for v in values[1:]]
    if score is not None:
        parts.append(f"{score:.2f}")
    return " ".join(parts)


def write_labels(path: str | Path, gts: list[GroundTruth]) -> None:
    """Write ground-truth rows back out in the 15-field text layout."""
    lines = [
        _format_label_fields(
            g.class_name,
            g.truncated,
            g.occluded,
            g.alpha,
            g.bbox2d,
            g.dims_hwl,
            g.location,
            g.rotation_y,
            None,
        )
        for g in gts
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_detections(path: str | Path, detections: list[Detection]) -> None:
    """Write detections as 16-field label lines (score last, 2-decimal floats)."""
    lines = []
    for det in detections:
        box = det.box
        l, w, h = box.dims
        x, y, z = box.center
        alpha = normalize_angle(box.yaw - np.arctan2(y, x))
        lines.append(
            _format_label_fields(
                det.class_name,
                0.0,
                0,
                alpha,
                (0.0, 0.0, 0.0, 0.0),
                (h, w, l),
                (x, y, z - 0.5 * h),
                box.yaw,
                det.score,
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_detections(path: str | Path) -> list[Detection]:
    """Read a detection file written by :func:`write_detections`.

    Rows without a score or with a class outside CLASS_NAMES are skipped;
    such rows are ground-truth bookkeeping, not predictions.
    """
    out = []
    for gt in read_kitti_labels(path):
        if gt.score is None or gt.class_name not in CLASS_NAMES:
            continue
        out.append(
            Detection(
                box=gt.box3d_lidar,
                score=gt.score,
                class_id=CLASS_NAMES.index(gt.class_name),
            )
        )
    return out


@dataclass
class Calibration:
    """Rigid LiDAR->camera transform and the rectifying rotation."""

    tr_velo_to_cam: np.ndarray  # (3, 4)
    r0_rect: np.ndarray  # (3, 3)


def read_calib(path: str | Path) -> Calibration:
    """Read Tr_velo_to_cam and R0_rect from a calib file."""
    matrices: dict[str, np.ndarray] = {}
    for line in Path(path).read_text().splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            matrices[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError:
            continue
    try:
        tr = matrices["Tr_velo_to_cam"].reshape(3, 4)
        r0_key = "R0_rect" if "R0_rect" in matrices else "R_rect"
        r0 = matrices[r0_key].reshape(3, 3)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: missing or malformed calib matrices") from exc
    return Calibration(tr_velo_to_cam=tr, r0_rect=r0)


def cam_to_lidar_points(points_cam: np.ndarray, calib: Calibration) -> np.ndarray:
    """Map (N, 3) rectified-camera points into the LiDAR frame."""
    points_cam = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    unrect = points_cam @ np.linalg.inv(calib.r0_rect).T
    rot = calib.tr_velo_to_cam[:, :3]
    trans = calib.tr_velo_to_cam[:, 3]
    return (unrect - trans) @ rot  # rot is orthonormal: inverse = transpose applied right


def boxes_to_lidar(gts: list[GroundTruth], calib: Calibration) -> list[GroundTruth]:
    """Re-derive box3d_lidar for camera-frame labels using a calibration."""
    out = []
    for gt in gts:
        bottom = cam_to_lidar_points(np.array([gt.location]), calib)[0]
        h, w, l = gt.dims_hwl
        yaw = normalize_angle(-gt.rotation_y - 0.5 * np.pi)
        box = Box3D(bottom + np.array([0.0, 0.0, 0.5 * h]), np.array([l, w, h]), yaw)
        out.append(replace(gt, box3d_lidar=box))
    return out


def detection_to_ground_truth(det: Detection) -> GroundTruth:
    """View a detection as a GroundTruth row (used when re-reading det files)."""
    box = det.box
    l, w, h = box.dims
    x, y, z = box.center
    return GroundTruth(
        class_name=det.class_name,
        truncated=0.0,
        occluded=0,
        alpha=normalize_angle(box.yaw - np.arctan2(y, x)),
        bbox2d=(0.0, 0.0, 0.0, 0.0),
        dims_hwl=(h, w, l),
        location=(x, y, z - 0.5 * h),
        rotation_y=box.yaw,
        score=det.score,
        box3d_lidar=box,
    )
