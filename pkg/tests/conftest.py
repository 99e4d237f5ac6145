"""Shared fixtures and builders for the test suite."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from voxelflow.pipeline import (
    BackboneConfig,
    DataConfig,
    DffmConfig,
    FsmConfig,
    HeadConfig,
    RunConfig,
    TrainConfig,
)
from voxelflow.sparse import SparseTensor
from voxelflow.voxelizer import VoxelConfig


def make_sparse(
    rng: np.random.Generator,
    grid_dims: tuple[int, int, int],
    channels: int,
    density: float = 0.3,
) -> SparseTensor:
    """Random sparse tensor with at least one active site."""
    mask = rng.random(grid_dims) < density
    coords = np.argwhere(mask).astype(np.int64)
    if coords.shape[0] == 0:
        coords = np.zeros((1, 3), dtype=np.int64)
    feats = rng.standard_normal((coords.shape[0], channels))
    return SparseTensor.create(grid_dims, coords, feats)


def small_run_config(**overrides) -> RunConfig:
    """A pipeline config small enough for per-test training and inference.

    Voxel grid 64x64x16 compresses to an 8x8 BEV cell grid; two frames with
    two boxes each keep forward passes in the millisecond range.
    """
    cfg = RunConfig(
        voxel=VoxelConfig(
            range_min=(0.0, -3.2, -2.0),
            range_max=(6.4, 3.2, 1.2),
            voxel_size=(0.1, 0.1, 0.2),
            max_voxels=4096,
        ),
        data=DataConfig(frames=2, num_boxes=2, points_per_box=80, noise_points=80, seed=0),
        backbone=BackboneConfig(widths=(4, 8, 8, 8)),
        dffm=DffmConfig(stages=(3,), target_rf=5),
        fsm=FsmConfig(enabled=True, keep_ratio=0.5, hidden=8),
        head=HeadConfig(hidden=8, score_threshold=0.3, nms_iou=0.3),
        train=TrainConfig(steps=5, lr=0.003, weight_decay=0.01, seed=0, log_every=100),
    )
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


@pytest.fixture(scope="session")
def tiny_config() -> RunConfig:
    return small_run_config()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
