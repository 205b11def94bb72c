"""End-to-end exercises of the command line, one subcommand at a time.

Everything drives cli.main(argv) in process so exit codes and printed
errors can be asserted without spawning interpreters.
"""

from __future__ import annotations

import json

import numpy as np
import pytest

from splatrig.cli import EXIT_OK, EXIT_STAGE, EXIT_VALIDATION, main
from splatrig.geometry import load_rig
from splatrig.pipeline import load_manifest
from splatrig.raster import warm_up
from splatrig.splats import load_scene


@pytest.fixture(scope="module", autouse=True)
def warm():
    warm_up()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["synth", "--out", str(out), "--seed", "2"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    cfg = tmp_path_factory.mktemp("cfg") / "small.json"
    cfg.write_text(
        json.dumps(
            {
                "fuse": {"voxel": 0.12},
                "train": {"warmup_steps": 2, "refine_steps": 2},
                "augment": {"n_per_camera": 1},
                "refiner": {"kind": "identity"},
            }
        )
    )
    return cfg


@pytest.fixture(scope="module")
def fused_scene(dataset, small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("fuse") / "init.egsp"
    rc = main(
        [
            "fuse",
            "--dataset",
            str(dataset),
            "--config",
            str(small_config),
            "--out",
            str(out),
        ]
    )
    assert rc == EXIT_OK
    return out


def test_no_arguments_is_a_usage_error(capsys):
    assert main([]) == EXIT_VALIDATION
    capsys.readouterr()


def test_unknown_subcommand_is_a_usage_error(capsys):
    assert main(["warp"]) == EXIT_VALIDATION
    capsys.readouterr()


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "synth" in capsys.readouterr().out


def test_synth_wrote_a_loadable_dataset(dataset):
    manifest = load_manifest(dataset)
    assert len(manifest.cameras) == 8
    assert manifest.timestamps == [0]
    assert manifest.wand_path.is_file()


def test_fuse_produces_a_scene(fused_scene):
    scene = load_scene(fused_scene)
    assert scene.count > 100


def test_fuse_missing_dataset_fails_validation(tmp_path, capsys):
    rc = main(["fuse", "--dataset", str(tmp_path / "no"), "--out", str(tmp_path / "s.egsp")])
    assert rc == EXIT_VALIDATION
    assert "error:" in capsys.readouterr().err


def test_train_writes_outputs(dataset, small_config, tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(
        [
            "train",
            "--dataset",
            str(dataset),
            "--config",
            str(small_config),
            "--out",
            str(out),
        ]
    )
    assert rc == EXIT_OK
    assert (out / "scene_t0000.egsp").is_file()
    assert (out / "metrics.json").is_file()
    assert (out / "provenance.json").is_file()
    assert "holdout PSNR" in capsys.readouterr().out


def test_train_rejects_unknown_config_key(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"turbo": True}}))
    rc = main(
        ["train", "--dataset", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "o")]
    )
    assert rc == EXIT_VALIDATION
    assert "error:" in capsys.readouterr().err


def test_render_writes_png(dataset, fused_scene, tmp_path):
    out = tmp_path / "view.png"
    rc = main(
        [
            "render",
            "--scene",
            str(fused_scene),
            "--rig",
            str(dataset / "rig_gt.json"),
            "--camera",
            "cam0L",
            "--out",
            str(out),
        ]
    )
    assert rc == EXIT_OK
    assert out.is_file()


def test_render_unknown_camera(dataset, fused_scene, tmp_path, capsys):
    rc = main(
        [
            "render",
            "--scene",
            str(fused_scene),
            "--rig",
            str(dataset / "rig_gt.json"),
            "--camera",
            "cam9L",
            "--out",
            str(tmp_path / "x.png"),
        ]
    )
    assert rc == EXIT_VALIDATION
    assert "not in rig" in capsys.readouterr().err


def test_calibrate_from_wand(dataset, tmp_path, capsys):
    out = tmp_path / "rig_cal.json"
    rc = main(
        [
            "calibrate",
            "--wand",
            str(dataset / "wand.jsonl"),
            "--intrinsics",
            str(dataset / "rig_gt.json"),
            "--out",
            str(out),
            "--seed",
            "7",
        ]
    )
    assert rc == EXIT_OK
    rig = load_rig(out)
    assert sorted(c.id for c in rig) == ["cam0L", "cam1L", "cam2L", "cam3L"]
    assert "mean reprojection" in capsys.readouterr().out


def test_eval_writes_suite_tables(dataset, small_config, tmp_path, capsys):
    out = tmp_path / "suite"
    rc = main(
        [
            "eval",
            "--dataset",
            str(dataset),
            "--config",
            str(small_config),
            "--out",
            str(out),
        ]
    )
    assert rc == EXIT_OK
    rows = json.loads((out / "suite.json").read_text())
    assert [r["variant"] for r in rows] == [
        "depth_reprojection",
        "baseline_3dgs",
        "no_augment",
        "full",
    ]
    assert all(r["error"] == "" for r in rows)
    csv_lines = (out / "suite.csv").read_text().splitlines()
    assert csv_lines[0].startswith("variant,psnr_mean")
    assert len(csv_lines) == 5
    assert "depth_reprojection: PSNR" in capsys.readouterr().out


def test_replay_bundle_from_cli(dataset, fused_scene, tmp_path):
    traj = tmp_path / "traj.json"
    traj.write_text(
        json.dumps(
            [
                {"q": [1, 0, 0, 0], "t": [0, 0, 0], "time": 0.0},
                {"q": [1, 0, 0, 0], "t": [0, 0, -0.1], "time": 0.1},
            ]
        )
    )
    out = tmp_path / "bundle"
    rc = main(
        [
            "replay",
            "--scene",
            f"0={fused_scene}",
            "--trajectory",
            str(traj),
            "--rig",
            str(dataset / "rig_gt.json"),
            "--out",
            str(out),
        ]
    )
    assert rc == EXIT_OK
    index = json.loads((out / "index.json").read_text())
    assert index["scenes"] == [{"timestamp": 0, "file": "scene_t0000.egsp"}]
    assert (out / "scene_t0000.egsp").read_bytes() == fused_scene.read_bytes()


def test_serve_rejects_missing_directory(tmp_path, capsys):
    rc = main(["serve", "--bundle", str(tmp_path / "missing")])
    assert rc == EXIT_VALIDATION
    assert "not a directory" in capsys.readouterr().err
