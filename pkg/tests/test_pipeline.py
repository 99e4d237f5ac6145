"""End-to-end model wiring: init, checkpoints, forward, training, timing."""

import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import small_run_config
from voxelflow.autodiff import Tape
from voxelflow.errors import ConfigError, DivergedLossError, ShapeMismatchError
from voxelflow.pipeline import (
    HeadConfig,
    TrainConfig,
    backbone_nodes,
    build_plan,
    cell_grid_for,
    detections_from_forward,
    evaluate_model,
    forward_nodes,
    frame_loss_nodes,
    infer_timed,
    init_model,
    load_checkpoint,
    make_suite,
    param_arrays,
    run_frame,
    save_checkpoint,
    train_toy,
)
from voxelflow.sparse import SparseTensor
from voxelflow.voxelizer import voxelize


@pytest.fixture(scope="module")
def cfg():
    return small_run_config()


@pytest.fixture(scope="module")
def scenes(cfg):
    return make_suite(cfg, frames=2, seed=0)


@pytest.fixture(scope="module")
def model(cfg):
    return init_model(cfg, np.random.default_rng(0))


@pytest.fixture(scope="module")
def frame(cfg, scenes):
    voxels, _ = voxelize(scenes[0][0], cfg.voxel)
    return voxels, build_plan(voxels)


def test_param_arrays_share_model_storage(cfg, model):
    arrays = param_arrays(model)
    assert arrays["entry.w"] is model.entry.weights
    assert arrays["stage2.down.w"] is model.stages[1].down.weights
    assert arrays["stage3.dffm.attn.w"] is model.stages[2].dffm.attention_conv.weights
    assert arrays["fsm.conv1.w"] is model.fsm.conv1.weights
    assert arrays["head.reg1.b"] is model.head.reg_convs[1].bias
    assert "stage1.down.w" not in arrays  # first stage keeps full resolution


def test_init_model_respects_config(cfg):
    model = init_model(cfg, np.random.default_rng(1))
    assert [s.dffm is not None for s in model.stages] == [False, False, True, False]
    assert model.fsm is not None


def test_init_model_without_fsm():
    base = small_run_config()
    cfg = small_run_config(fsm=replace(base.fsm, enabled=False))
    model = init_model(cfg, np.random.default_rng(1))
    assert model.fsm is None
    assert not any(k.startswith("fsm.") for k in param_arrays(model))


def test_init_model_deterministic(cfg):
    a = param_arrays(init_model(cfg, np.random.default_rng(7)))
    b = param_arrays(init_model(cfg, np.random.default_rng(7)))
    assert set(a) == set(b)
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_checkpoint_round_trip(tmp_path, cfg):
    model = init_model(cfg, np.random.default_rng(2))
    before = {k: v.copy() for k, v in param_arrays(model).items()}
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, model)
    for arr in param_arrays(model).values():
        arr += 1.0
    load_checkpoint(path, model)
    after = param_arrays(model)
    for name in before:
        np.testing.assert_array_equal(after[name], before[name])


def test_checkpoint_mismatch_raises(tmp_path, cfg):
    model = init_model(cfg, np.random.default_rng(2))
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, model)
    other = init_model(
        small_run_config(head=HeadConfig(hidden=4, score_threshold=0.3, nms_iou=0.3)),
        np.random.default_rng(3),
    )
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(path, other)


def test_build_plan_stage_geometry(cfg, frame):
    voxels, plan = frame
    assert len(plan.stages) == 4
    dims = [s.grid_dims for s in plan.stages]
    assert dims[0] == (64, 64, 16)
    for prev, cur in zip(dims, dims[1:]):
        assert cur == tuple(math.ceil(d / 2) for d in prev)
    assert plan.final is plan.stages[-1]
    assert plan.stages[0].rb_down is None
    assert all(s.rb_down is not None for s in plan.stages[1:])
    grid = cell_grid_for(cfg)
    assert grid.shape == (8, 8)
    assert grid.cell_size == (pytest.approx(0.8), pytest.approx(0.8))
    assert grid.z_ref == pytest.approx(-0.4)


def test_forward_site_counts_and_fsm_halving(cfg, model, frame):
    voxels, plan = frame
    tape = Tape()
    out = forward_nodes(tape, voxels, cfg, model, plan=plan)
    n_final = plan.final.coords.shape[0]
    assert out.site_counts["stage1"] == voxels.coords.shape[0]
    assert out.site_counts["head"] == math.ceil(0.5 * n_final)
    assert out.importance is not None
    assert out.importance.value.shape == (n_final, 1)
    assert out.head_coords.shape[0] == out.site_counts["head"]

    tape2 = Tape()
    off = forward_nodes(tape2, voxels, cfg, model, plan=plan, fsm_enabled=False)
    assert off.importance is None
    assert off.site_counts["head"] == n_final
    assert off.cells.shape[0] >= out.cells.shape[0]

    dets = detections_from_forward(out, cfg)
    assert all(d.class_id == 0 for d in dets)


def test_backbone_rejects_wrong_channels(cfg, model):
    bad = SparseTensor.create((64, 64, 16), np.array([[0, 0, 0]]), np.ones((1, 3)))
    with pytest.raises(ShapeMismatchError):
        backbone_nodes(Tape(), bad, cfg, model, build_plan(bad))


def test_fsm_requested_without_params(frame):
    base = small_run_config()
    no_fsm_cfg = small_run_config(fsm=replace(base.fsm, enabled=False))
    model = init_model(no_fsm_cfg, np.random.default_rng(0))
    voxels, plan = frame
    with pytest.raises(ConfigError):
        forward_nodes(Tape(), voxels, no_fsm_cfg, model, plan=plan, fsm_enabled=True)


def test_frame_loss_parts(cfg, model, scenes, frame):
    voxels, plan = frame
    tape = Tape()
    out = forward_nodes(tape, voxels, cfg, model, plan=plan)
    total, parts = frame_loss_nodes(tape, out, cfg, scenes[0][1])
    assert set(parts) == {"cls", "reg", "imp", "total"}
    assert parts["imp"] > 0.0
    expected = parts["cls"] + 2.0 * parts["reg"] + cfg.fsm.lambda_imp * parts["imp"]
    assert parts["total"] == pytest.approx(expected, rel=1e-12)
    assert float(total.value) == parts["total"]

    tape2 = Tape()
    out2 = forward_nodes(tape2, voxels, cfg, model, plan=plan, fsm_enabled=False)
    _, parts2 = frame_loss_nodes(tape2, out2, cfg, scenes[0][1])
    assert parts2["imp"] == 0.0
    assert parts2["total"] == pytest.approx(parts2["cls"] + 2.0 * parts2["reg"], rel=1e-12)


def test_train_toy_runs_and_is_deterministic(cfg, scenes):
    model_a, report_a = train_toy(scenes, cfg)
    model_b, report_b = train_toy(scenes, cfg)
    assert len(report_a.steps) == cfg.train.steps
    assert set(report_a.steps[0]) == {"step", "cls", "reg", "imp", "total"}
    assert report_a.initial_loss == report_a.steps[0]["total"]
    assert report_a.final_loss == report_a.steps[-1]["total"]
    for sa, sb in zip(report_a.steps, report_b.steps):
        assert sa == sb
    arrays_a, arrays_b = param_arrays(model_a), param_arrays(model_b)
    for name in arrays_a:
        np.testing.assert_array_equal(arrays_a[name], arrays_b[name])
    payload = report_a.to_json_dict()
    assert payload["num_steps"] == cfg.train.steps
    assert payload["seed"] == cfg.train.seed


def test_train_toy_loss_decreases(scenes):
    cfg = small_run_config(
        train=TrainConfig(steps=40, lr=0.003, weight_decay=0.01, seed=0, log_every=100)
    )
    _, report = train_toy(scenes[:1], cfg)
    assert report.final_loss < report.initial_loss


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_toy_divergence_raises(scenes):
    cfg = small_run_config(
        train=TrainConfig(steps=30, lr=1e30, weight_decay=0.01, seed=0, log_every=100)
    )
    with pytest.raises(DivergedLossError):
        train_toy(scenes[:1], cfg)


def test_train_toy_empty_scene_list(cfg):
    with pytest.raises(ConfigError):
        train_toy([], cfg)


def test_run_frame_stats(cfg, model, scenes):
    dets, stats = run_frame(scenes[0][0], cfg, model)
    assert set(stats) == {
        "voxelize_ms", "backbone_ms", "fsm_ms", "head_nms_ms", "total_ms",
        "sites_final", "sites_head", "cells_head", "boxes_pre_nms", "num_detections",
    }
    assert stats["sites_head"] == math.ceil(0.5 * stats["sites_final"])
    assert stats["num_detections"] == len(dets)
    assert stats["num_detections"] <= stats["boxes_pre_nms"]
    assert stats["total_ms"] > 0.0

    _, stats_off = run_frame(scenes[0][0], cfg, model, fsm_enabled=False)
    assert stats_off["sites_head"] == stats_off["sites_final"]
    assert stats_off["sites_head"] > stats["sites_head"]


def test_infer_timed_warmup_exclusion(cfg, model, scenes):
    clouds = [scenes[i % 2][0] for i in range(5)]
    dets, report = infer_timed(clouds, cfg, model, warmup=3)
    assert len(dets) == 5
    assert len(report.frames) == 2
    assert report.warmup == 3
    payload = report.to_json_dict()
    assert payload["num_frames"] == 2
    assert set(payload["mean_phase_ms"]) == {"voxelize", "backbone", "fsm", "head_nms"}
    assert report.mean("total_ms") > 0.0

    short_dets, short_report = infer_timed(clouds[:2], cfg, model, warmup=3)
    assert len(short_dets) == 2
    assert short_report.frames == []
    assert short_report.warmup == 2
    assert short_report.mean("total_ms") == 0.0


def test_infer_timed_threads_match_serial(cfg, model, scenes):
    clouds = [scenes[0][0], scenes[1][0]]
    serial, _ = infer_timed(clouds, cfg, model, warmup=0, timing=False)
    pooled, _ = infer_timed(clouds, cfg, model, warmup=0, timing=False, threads=2)
    assert len(serial) == len(pooled) == 2
    for s_frame, p_frame in zip(serial, pooled):
        assert len(s_frame) == len(p_frame)
        for s, p in zip(s_frame, p_frame):
            assert s.score == p.score
            np.testing.assert_array_equal(s.box.center, p.box.center)


def test_evaluate_model_shapes(cfg, model, scenes):
    result, dets = evaluate_model(scenes, cfg, model)
    assert result.num_frames == len(scenes)
    assert len(dets) == len(scenes)
    assert set(result.ap) == {"Car"}


def test_make_suite_deterministic(cfg):
    a = make_suite(cfg, frames=3, seed=5)
    b = make_suite(cfg, frames=3, seed=5)
    c = make_suite(cfg, frames=3, seed=6)
    assert len(a) == 3
    np.testing.assert_array_equal(a[1][0].points, b[1][0].points)
    assert not np.array_equal(a[0][0].points, c[0][0].points)
    assert all(len(gts) == cfg.data.num_boxes for _, gts in a)
