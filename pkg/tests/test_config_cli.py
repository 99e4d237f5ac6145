"""JSON config loading and the command line surface."""

import json
from pathlib import Path

import numpy as np
import pytest

from conftest import small_run_config
from voxelflow.cli import main
from voxelflow.config import config_from_dict, config_to_dict, load_config, save_config
from voxelflow.errors import ConfigError
from voxelflow.geometry import Box3D, Detection
from voxelflow.kitti_io import write_labels
from voxelflow.pipeline import RunConfig, make_suite

REPO_CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_empty_config_is_all_defaults():
    cfg = config_from_dict({})
    assert cfg == RunConfig()
    assert cfg.voxel.grid_dims == (128, 128, 16)


def test_sections_and_list_to_tuple():
    cfg = config_from_dict(
        {
            "train": {"steps": 7, "lr": 0.01},
            "backbone": {"widths": [4, 8, 8, 8]},
            "dffm": {"stages": [1, 4]},
        }
    )
    assert cfg.train.steps == 7
    assert cfg.backbone.widths == (4, 8, 8, 8)
    assert cfg.dffm.stages == (1, 4)
    assert cfg.fsm.enabled is False  # untouched section keeps defaults


@pytest.mark.parametrize(
    "data,fragment",
    [
        ({"trian": {}}, "unknown section"),
        ({"train": {"stepz": 3}}, "unknown key train.stepz"),
        ({"train": []}, "train: expected an object"),
        ({"train": {"steps": 0}}, "at least one step"),
        ([], "config root"),
    ],
)
def test_config_rejections(data, fragment):
    with pytest.raises(ConfigError, match=fragment):
        config_from_dict(data)


def test_config_file_round_trip(tmp_path):
    cfg = small_run_config()
    path = tmp_path / "run.json"
    save_config(path, cfg)
    assert load_config(path) == cfg
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_invalid_json_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)


@pytest.mark.parametrize("name", ["toy.json", "kitti.json"])
def test_shipped_configs_load(name):
    cfg = load_config(REPO_CONFIGS / name)
    assert isinstance(cfg, RunConfig)


@pytest.fixture()
def cfg_file(tmp_path):
    path = tmp_path / "config.json"
    save_config(path, small_run_config())
    return str(path)


def test_cli_voxelize_outputs(tmp_path, cfg_file, capsys):
    out = tmp_path / "vox"
    assert main(["voxelize", "--config", cfg_file, "--synthetic", "0", "--out", str(out)]) == 0
    for name in ("voxels.json", "voxels.csv", "voxels.png"):
        assert (out / name).exists()
    printed = json.loads(capsys.readouterr().out)
    assert printed["grid_dims"] == [64, 64, 16]
    assert printed["num_voxels"] > 0
    payload = json.loads((out / "voxels.json").read_text())
    assert payload["tensor"]["grid_dims"] == [64, 64, 16]


def test_cli_flops_outputs(tmp_path, cfg_file, capsys):
    out = tmp_path / "flops"
    assert main(["flops", "--config", cfg_file, "--out", str(out)]) == 0
    for name in ("flops.json", "flops_monolithic.csv", "flops_decoupled.csv", "flops.png"):
        assert (out / name).exists()
    payload = json.loads((out / "flops.json").read_text())
    assert payload["decoupled_smaller"] is True
    assert payload["interior_macs_per_site_ratio"] == {"k5": 125, "2x_k3": 54}
    assert payload["decoupled_2x_k3"]["total_macs"] < payload["monolithic_k5"]["total_macs"]
    capsys.readouterr()


def test_cli_train_infer_chain(tmp_path, cfg_file, capsys):
    train_out = tmp_path / "train"
    assert main(
        ["train-toy", "--config", cfg_file, "--seed", "5", "--out", str(train_out)]
    ) == 0
    for name in ("checkpoint.json", "train_report.json", "loss.csv", "loss.png"):
        assert (train_out / name).exists()
    report = json.loads((train_out / "train_report.json").read_text())
    assert report["seed"] == 5
    assert report["num_steps"] == 5
    assert "final_loss" in capsys.readouterr().out

    infer_out = tmp_path / "infer"
    assert main(
        [
            "infer", "--config", cfg_file,
            "--checkpoint", str(train_out / "checkpoint.json"),
            "--frames", "5", "--warmup", "1", "--out", str(infer_out),
        ]
    ) == 0
    for name in ("timing.json", "timing.csv", "timing.png"):
        assert (infer_out / name).exists()
    det_files = sorted((infer_out / "detections").glob("*.txt"))
    assert [p.name for p in det_files] == [f"{i:06d}.txt" for i in range(5)]
    timing = json.loads((infer_out / "timing.json").read_text())
    assert timing["num_frames"] == 4
    assert timing["warmup"] == 1
    capsys.readouterr()

    off_out = tmp_path / "infer_off"
    assert main(
        [
            "infer", "--config", cfg_file,
            "--checkpoint", str(train_out / "checkpoint.json"),
            "--frames", "3", "--warmup", "0", "--no-fsm", "--out", str(off_out),
        ]
    ) == 0
    on_frames = timing["frames"]
    off_frames = json.loads((off_out / "timing.json").read_text())["frames"]
    assert all(f["sites_head"] == f["sites_final"] for f in off_frames)
    assert all(f["sites_head"] < f["sites_final"] for f in on_frames)
    capsys.readouterr()


def test_cli_eval_outputs(tmp_path, cfg_file, capsys):
    cfg = small_run_config()
    scenes = make_suite(cfg, frames=2, seed=3)
    gt_dir = tmp_path / "gts"
    det_dir = tmp_path / "dets"
    gt_dir.mkdir()
    det_dir.mkdir()
    for i, (_, gts) in enumerate(scenes):
        write_labels(gt_dir / f"{i:06d}.txt", gts)
    # Perfect detections for frame 0 only; frame 1 has no detection file.
    from voxelflow.kitti_io import write_detections

    dets = [
        Detection(g.box3d_lidar, 0.9 - 0.1 * j, 0)
        for j, g in enumerate(scenes[0][1])
    ]
    write_detections(det_dir / "000000.txt", dets)

    out = tmp_path / "eval"
    assert main(
        [
            "eval", "--config", cfg_file,
            "--dets", str(det_dir), "--gts", str(gt_dir), "--out", str(out),
        ]
    ) == 0
    for name in ("eval.json", "eval.csv", "pr_curves.png"):
        assert (out / name).exists()
    captured = capsys.readouterr().out
    assert "class" in captured and "moderate" in captured
    payload = json.loads((out / "eval.json").read_text())
    assert payload["num_frames"] == 2
    assert "Car" in payload["ap"]


def test_cli_eval_requires_labels(tmp_path, cfg_file, capsys):
    empty = tmp_path / "none"
    empty.mkdir()
    code = main(
        ["eval", "--config", cfg_file, "--dets", str(empty), "--gts", str(empty),
         "--out", str(tmp_path / "out")]
    )
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"


def test_cli_error_paths(tmp_path, capsys):
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text('{"train": {"stepz": 1}}')
    assert main(["voxelize", "--config", str(bad_cfg), "--out", str(tmp_path / "o")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"
    assert "stepz" in err["message"]

    good_cfg = tmp_path / "good.json"
    save_config(good_cfg, small_run_config())
    assert main(
        ["infer", "--config", str(good_cfg), "--checkpoint", str(tmp_path / "missing.json"),
         "--out", str(tmp_path / "o2")]
    ) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "OSError"


def test_cli_thread_env_cap(monkeypatch):
    from voxelflow.cli import _threads

    monkeypatch.setenv("VOXELFLOW_THREADS", "4")
    assert _threads() == 4
    monkeypatch.setenv("VOXELFLOW_THREADS", "0")
    assert _threads() == 1
    monkeypatch.setenv("VOXELFLOW_THREADS", "junk")
    assert _threads() == 1
