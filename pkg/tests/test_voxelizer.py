"""Point cropping, voxelization, augmentation, and ground-truth sampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelflow.errors import ConfigError
from voxelflow.geometry import contains_points, contains_points_bev
from voxelflow.kitti_io import PointCloud
from voxelflow.sparse import linearize
from voxelflow.synthetic import SceneConfig, gen_synthetic_scene
from voxelflow.voxelizer import (
    AugmentConfig,
    VoxelConfig,
    apply_transform,
    augment,
    build_gt_database,
    crop_points,
    gt_sample,
    voxelize,
)


def _cloud(xyz, intensity=0.5):
    xyz = np.asarray(xyz, dtype=np.float64)
    return PointCloud(np.column_stack([xyz, np.full(len(xyz), intensity)]))


def test_default_config_grid_dims():
    # 70.4/0.05, 80/0.05, 4/0.1.
    assert VoxelConfig().grid_dims == (1408, 1600, 40)


def test_config_validation():
    with pytest.raises(ConfigError):
        VoxelConfig(range_min=(0, 0, 0), range_max=(0, 1, 1), voxel_size=(0.1, 0.1, 0.1))
    with pytest.raises(ConfigError):
        VoxelConfig(voxel_size=(0.1, -0.1, 0.1))


def test_hand_voxel_index():
    cfg = VoxelConfig()
    tensor, report = voxelize(_cloud([[0.025, 0.0, -2.95]]), cfg)
    np.testing.assert_array_equal(tensor.coords, [[0, 800, 0]])
    assert report.num_points == 1
    assert report.num_voxels == 1


def test_crop_is_half_open():
    cfg = VoxelConfig(range_min=(0, 0, 0), range_max=(1, 1, 1), voxel_size=(0.1, 0.1, 0.1))
    cloud = _cloud([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5], [1.0, 0.5, 0.5], [0.5, -1e-12, 0.5]])
    kept = crop_points(cloud, cfg)
    assert len(kept) == 2  # lo inclusive, hi exclusive, below-lo dropped


def test_mean_pooling_within_voxel():
    cfg = VoxelConfig(range_min=(0, 0, 0), range_max=(1, 1, 1), voxel_size=(0.5, 0.5, 0.5))
    pts = np.array(
        [
            [0.1, 0.1, 0.1, 1.0],
            [0.3, 0.2, 0.4, 3.0],
            [0.7, 0.1, 0.1, 5.0],
        ]
    )
    tensor, report = voxelize(PointCloud(pts), cfg)
    assert tensor.num_active == 2
    np.testing.assert_array_equal(tensor.coords, [[0, 0, 0], [1, 0, 0]])
    np.testing.assert_allclose(tensor.features[0], [0.2, 0.15, 0.25, 2.0])
    np.testing.assert_allclose(tensor.features[1], [0.7, 0.1, 0.1, 5.0])
    assert report.num_points == 3


def test_output_order_is_canonical():
    cfg = VoxelConfig(range_min=(0, 0, 0), range_max=(1, 1, 1), voxel_size=(0.1, 0.1, 0.1))
    rng = np.random.default_rng(11)
    cloud = _cloud(rng.uniform(0, 1, size=(200, 3)))
    tensor, _ = voxelize(cloud, cfg)
    ids = linearize(tensor.coords, tensor.grid_dims)
    assert np.all(np.diff(ids) > 0)


def test_hi_edge_float_clamp():
    # 0.1 * 17 overshoots the decimal 1.7; the largest double below that edge
    # floors to index 17 and must be clamped into the last voxel.
    hi = 0.1 * 17
    cfg = VoxelConfig(range_min=(0, 0, 0), range_max=(hi, 1, 1), voxel_size=(0.1, 0.1, 0.1))
    assert cfg.grid_dims[0] == 17
    p = np.nextafter(hi, 0.0)
    tensor, _ = voxelize(_cloud([[p, 0.5, 0.5]]), cfg)
    assert tensor.num_active == 1
    assert tensor.coords[0, 0] == 16


def test_truncation_keeps_first_encountered_voxels():
    cfg = VoxelConfig(
        range_min=(0, 0, 0), range_max=(1, 1, 1), voxel_size=(0.1, 0.1, 0.1), max_voxels=2
    )
    # Encounter order: C(voxel 5), A(voxel 1), B(voxel 8), again C.
    cloud = _cloud(
        [
            [0.55, 0.05, 0.05],
            [0.15, 0.05, 0.05],
            [0.85, 0.05, 0.05],
            [0.51, 0.05, 0.05],
        ]
    )
    tensor, report = voxelize(cloud, cfg)
    assert tensor.num_active == 2
    np.testing.assert_array_equal(tensor.coords[:, 0], [1, 5])  # canonical order
    # Voxel 5 pooled both of its points even though a later voxel was dropped.
    np.testing.assert_allclose(tensor.features[1, 0], 0.53)
    assert report.dropped_voxels == 1
    assert report.dropped_points == 1
    assert report.truncated


def test_empty_after_crop():
    cfg = VoxelConfig(range_min=(0, 0, 0), range_max=(1, 1, 1), voxel_size=(0.1, 0.1, 0.1))
    tensor, report = voxelize(_cloud([[5.0, 5.0, 5.0]]), cfg)
    assert tensor.num_active == 0
    assert tensor.channels == 4
    assert report.num_points == 0
    assert not report.truncated


def test_report_json_dict():
    _, report = voxelize(_cloud([[0.1, 0.1, 0.1]]), VoxelConfig((0, 0, 0), (1, 1, 1), (0.5, 0.5, 0.5)))
    d = report.to_json_dict()
    assert d == {
        "num_points": 1,
        "num_voxels": 1,
        "dropped_voxels": 0,
        "dropped_points": 0,
        "truncated": False,
    }


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_voxelize_never_leaves_grid(seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-20, 0, size=3)
    size = rng.uniform(0.05, 0.5, size=3)
    n = rng.integers(2, 40, size=3)
    hi = lo + size * n
    cfg = VoxelConfig(tuple(lo), tuple(hi), tuple(size))
    pts = rng.uniform(lo - 0.5, hi + 0.5, size=(100, 3))
    # Include exact-edge points.
    pts = np.vstack([pts, lo, np.nextafter(hi, lo)])
    tensor, _ = voxelize(_cloud(pts), cfg)
    assert np.all(tensor.coords >= 0)
    assert np.all(tensor.coords < np.asarray(cfg.grid_dims))


def test_apply_transform_keeps_points_in_boxes():
    cloud, gts = gen_synthetic_scene(SceneConfig(num_boxes=2, points_per_box=80, seed=6))
    out_cloud, out_gts = apply_transform(cloud, gts, flip=True, rotation=0.4, scale=1.03)
    for i, gt in enumerate(out_gts):
        chunk = out_cloud.xyz[i * 80 : (i + 1) * 80]
        assert np.all(contains_points(gt.box3d_lidar, chunk))
        h = gt.dims_hwl[0]
        assert gt.box3d_lidar.center[2] == pytest.approx(gt.location[2] + 0.5 * h)
        assert gt.rotation_y == pytest.approx(gt.box3d_lidar.yaw)


def test_apply_transform_identity():
    cloud, gts = gen_synthetic_scene(SceneConfig(seed=7))
    out_cloud, out_gts = apply_transform(cloud, gts, flip=False, rotation=0.0, scale=1.0)
    np.testing.assert_array_equal(out_cloud.points, cloud.points)
    np.testing.assert_array_equal(out_gts[0].box3d_lidar.center, gts[0].box3d_lidar.center)


def test_augment_is_rng_deterministic():
    cloud, gts = gen_synthetic_scene(SceneConfig(seed=8))
    cfg = AugmentConfig(enabled=True)
    a = augment(cloud, gts, np.random.default_rng(42), cfg)
    b = augment(cloud, gts, np.random.default_rng(42), cfg)
    np.testing.assert_array_equal(a[0].points, b[0].points)


def test_augment_zero_ranges_is_identity():
    cloud, gts = gen_synthetic_scene(SceneConfig(seed=9))
    cfg = AugmentConfig(enabled=True, flip_prob=0.0, rotation_range=(0.0, 0.0), scale_range=(1.0, 1.0))
    out_cloud, _ = augment(cloud, gts, np.random.default_rng(0), cfg)
    np.testing.assert_array_equal(out_cloud.points, cloud.points)


def test_build_gt_database_skips_neutral_classes():
    cloud, gts = gen_synthetic_scene(SceneConfig(num_boxes=2, points_per_box=50, seed=10))
    from dataclasses import replace

    gts = [gts[0], replace(gts[1], class_name="DontCare")]
    db = build_gt_database([(cloud, gts)])
    assert len(db) == 1
    assert db[0].ground_truth.class_name == "Car"
    assert db[0].points.shape[0] >= 50  # its surface points, possibly plus noise hits


def test_gt_sample_inserts_collision_free_boxes():
    donor_scene = gen_synthetic_scene(SceneConfig(num_boxes=3, points_per_box=60, seed=11))
    db = build_gt_database([donor_scene])
    cloud, gts = gen_synthetic_scene(SceneConfig(num_boxes=2, points_per_box=60, seed=12))
    aug = AugmentConfig(enabled=True, gt_sample_count=2)
    vox = VoxelConfig((0.0, -6.4, -2.0), (12.8, 6.4, 1.2), (0.1, 0.1, 0.2))
    out_cloud, out_gts = gt_sample(cloud, gts, db, np.random.default_rng(5), aug, vox)

    inserted = out_gts[len(gts):]
    assert 0 < len(inserted) <= 2
    lo, hi = np.asarray(vox.range_min), np.asarray(vox.range_max)
    for gt in inserted:
        assert np.all(gt.box3d_lidar.center >= lo)
        assert np.all(gt.box3d_lidar.center <= hi)
    # Host points under an inserted footprint were removed; survivors keep order.
    survivor_mask = np.ones(len(cloud), dtype=bool)
    for gt in inserted:
        survivor_mask &= ~contains_points_bev(gt.box3d_lidar, cloud.xyz[:, :2])
    expected_prefix = cloud.points[survivor_mask]
    np.testing.assert_array_equal(out_cloud.points[: len(expected_prefix)], expected_prefix)
    # Appended rows are donor points sitting inside some inserted box.
    tail = out_cloud.xyz[len(expected_prefix):]
    inside_any = np.zeros(len(tail), dtype=bool)
    for gt in inserted:
        inside_any |= contains_points(gt.box3d_lidar, tail)
    assert np.all(inside_any)


def test_gt_sample_disabled_is_passthrough():
    cloud, gts = gen_synthetic_scene(SceneConfig(seed=13))
    aug = AugmentConfig(gt_sample_count=0)
    out_cloud, out_gts = gt_sample(cloud, gts, [], np.random.default_rng(0), aug, VoxelConfig())
    assert out_cloud is cloud
    assert out_gts is gts
