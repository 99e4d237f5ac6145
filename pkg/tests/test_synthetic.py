"""Synthetic desk-scale scene generation."""

import numpy as np
import pytest

from voxelflow.errors import GenerationError
from voxelflow.geometry import bev_corners, contains_points
from voxelflow.synthetic import SceneConfig, gen_scene_batch, gen_synthetic_scene


def test_scene_shape_and_counts():
    cfg = SceneConfig(num_boxes=3, points_per_box=150, noise_points=200, seed=0)
    cloud, gts = gen_synthetic_scene(cfg)
    assert len(gts) == 3
    assert len(cloud) == 3 * 150 + 200
    assert cloud.points.shape == (650, 4)


def test_scene_points_inside_range():
    cfg = SceneConfig(seed=1)
    cloud, _ = gen_synthetic_scene(cfg)
    lo = np.array(cfg.range_min)
    hi = np.array(cfg.range_max)
    assert np.all(cloud.xyz >= lo - 1e-9)
    assert np.all(cloud.xyz <= hi + 1e-9)


def test_box_points_lie_on_their_box():
    cfg = SceneConfig(num_boxes=2, points_per_box=100, noise_points=50, seed=2)
    cloud, gts = gen_synthetic_scene(cfg)
    # Rows come out in box order: points_per_box per box, then noise.
    for i, gt in enumerate(gts):
        chunk = cloud.xyz[i * 100 : (i + 1) * 100]
        assert np.all(contains_points(gt.box3d_lidar, chunk))


def test_ground_truth_rows_are_well_formed():
    cfg = SceneConfig(seed=3)
    _, gts = gen_synthetic_scene(cfg)
    for gt in gts:
        assert gt.class_name == "Car"
        assert gt.truncated == 0.0
        assert gt.occluded == 0
        assert gt.box3d_lidar is not None
        h, w, l = gt.dims_hwl
        np.testing.assert_allclose(gt.box3d_lidar.dims, [l, w, h])
        # location is the bottom center.
        assert gt.box3d_lidar.center[2] == pytest.approx(gt.location[2] + 0.5 * h)
        assert 5.0 <= gt.bbox_height <= 300.0


def test_boxes_do_not_overlap_in_bev():
    cfg = SceneConfig(num_boxes=4, seed=4)
    _, gts = gen_synthetic_scene(cfg)
    for i, a in enumerate(gts):
        for b in gts[i + 1 :]:
            ca = bev_corners(a.box3d_lidar)
            cb = bev_corners(b.box3d_lidar)
            # Separated boxes: no corner of either lies inside the other.
            from voxelflow.geometry import contains_points_bev

            assert not np.any(contains_points_bev(b.box3d_lidar, ca))
            assert not np.any(contains_points_bev(a.box3d_lidar, cb))


def test_generation_is_seed_deterministic():
    cfg = SceneConfig(seed=5)
    cloud_a, gts_a = gen_synthetic_scene(cfg)
    cloud_b, gts_b = gen_synthetic_scene(cfg)
    np.testing.assert_array_equal(cloud_a.points, cloud_b.points)
    for ga, gb in zip(gts_a, gts_b):
        np.testing.assert_array_equal(ga.box3d_lidar.center, gb.box3d_lidar.center)
        assert ga.box3d_lidar.yaw == gb.box3d_lidar.yaw


def test_batch_uses_incrementing_seeds():
    cfg = SceneConfig(seed=10)
    batch = gen_scene_batch(cfg, 3)
    assert len(batch) == 3
    single = gen_synthetic_scene(SceneConfig(seed=12))
    np.testing.assert_array_equal(batch[2][0].points, single[0].points)
    # Frames differ from each other.
    assert not np.array_equal(batch[0][0].points, batch[1][0].points)


def test_impossible_packing_raises():
    # Far more car-sized boxes than the range can hold without overlap.
    cfg = SceneConfig(
        range_min=(0.0, -1.0, -0.5),
        range_max=(2.0, 1.0, 0.5),
        num_boxes=60,
        points_per_box=5,
        noise_points=0,
        seed=0,
    )
    with pytest.raises(GenerationError):
        gen_synthetic_scene(cfg)
