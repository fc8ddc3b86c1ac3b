import json

import numpy as np
import pytest

from lidarstereo.cli import main, turbo_colormap
from lidarstereo.model import ModelConfig, StereoModel
from lidarstereo.scenegen import read_pfm, read_sparse_csv

TINY_MODEL = ["--feat-channels", "6", "--ctx-channels", "6",
              "--hidden-channels", "6", "--motion-channels", "6",
              "--gru-iters", "2", "--cspn-iters", "2",
              "--lookup-radius", "2", "--lookup-levels", "2"]
TINY_SCENE = ["--height", "16", "--width", "32", "--layers", "2",
              "--d-min", "2", "--d-max", "5"]


def tiny_model_config():
    return ModelConfig(feat_channels=6, ctx_channels=6, hidden_channels=6,
                       motion_channels=6, gru_iters=2, cspn_iters=2,
                       lookup_radius=2, lookup_levels=2)


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenes")
    code = main(["generate", "--out", str(out), "--count", "2",
                 "--points", "20", "--seed", "5"] + TINY_SCENE)
    assert code == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.bin"
    StereoModel(tiny_model_config(), seed=0).save(path)
    return path


def test_unknown_flag_exits_one(capsys):
    assert main(["generate", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_exits_one():
    assert main([]) == 1


def test_generate_artifacts_and_manifest(scene_dir):
    manifest = json.loads((scene_dir / "manifest.json").read_text())
    assert manifest["subcommand"] == "generate"
    assert manifest["seed"] == 5
    assert manifest["config"]["scene"]["height"] == 16
    for name in manifest["artifacts"]:
        assert (scene_dir / name).exists()
    gt = read_pfm(scene_dir / "scene000" / "gt.pfm")
    assert gt.shape == (16, 32)
    sp = read_sparse_csv(scene_dir / "scene000" / "sparse.csv", (16, 32))
    assert sp.count == 20


def test_generate_replay_bit_identical(scene_dir, tmp_path):
    out = tmp_path / "replay"
    assert main(["generate", "--out", str(out), "--config",
                 str(scene_dir / "manifest.json")]) == 0
    for sub in ("scene000", "scene001"):
        for name in ("left.ppm", "right.ppm", "gt.pfm", "valid.pfm",
                     "sparse.csv"):
            assert (out / sub / name).read_bytes() == \
                (scene_dir / sub / name).read_bytes()


def test_flag_overrides_config_file(scene_dir, tmp_path):
    out = tmp_path / "wide"
    assert main(["generate", "--out", str(out), "--config",
                 str(scene_dir / "manifest.json"), "--width", "48"]) == 0
    assert read_pfm(out / "scene000" / "gt.pfm").shape == (16, 48)


def test_infer_keeps_seed_values(scene_dir, checkpoint, tmp_path):
    out = tmp_path / "inf"
    scene = scene_dir / "scene000"
    assert main(["infer", "--out", str(out), "--left", str(scene / "left.ppm"),
                 "--right", str(scene / "right.ppm"),
                 "--sparse", str(scene / "sparse.csv"),
                 "--checkpoint", str(checkpoint), "--color"]
                + TINY_MODEL) == 0
    pred = read_pfm(out / "disparity.pfm")
    sp = read_sparse_csv(scene / "sparse.csv", (16, 32))
    # seed disparities are small integers, exactly representable in float32
    assert np.array_equal(pred[sp.valid], sp.values[sp.valid])
    assert (out / "disparity.ppm").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["colormap"]["max"] >= manifest["colormap"]["min"]


def test_infer_replay_from_manifest(scene_dir, checkpoint, tmp_path):
    first = tmp_path / "a"
    scene = scene_dir / "scene001"
    assert main(["infer", "--out", str(first), "--left",
                 str(scene / "left.ppm"), "--right", str(scene / "right.ppm"),
                 "--checkpoint", str(checkpoint)] + TINY_MODEL) == 0
    second = tmp_path / "b"
    assert main(["infer", "--out", str(second), "--config",
                 str(first / "manifest.json")]) == 0
    assert (first / "disparity.pfm").read_bytes() == \
        (second / "disparity.pfm").read_bytes()


def test_infer_missing_input_is_data_error(checkpoint, tmp_path, capsys):
    assert main(["infer", "--out", str(tmp_path / "x"),
                 "--left", "/nonexistent.ppm", "--right", "/nonexistent.ppm",
                 "--checkpoint", str(checkpoint)] + TINY_MODEL) == 2
    assert "error" in capsys.readouterr().err


def test_infer_nan_checkpoint_is_numeric_error(scene_dir, tmp_path, capsys):
    model = StereoModel(tiny_model_config(), seed=0)
    model.params["mask.c2.w"].data[:] = np.nan
    bad = tmp_path / "bad.bin"
    model.save(bad)
    scene = scene_dir / "scene000"
    assert main(["infer", "--out", str(tmp_path / "x"),
                 "--left", str(scene / "left.ppm"),
                 "--right", str(scene / "right.ppm"),
                 "--checkpoint", str(bad)] + TINY_MODEL) == 3


def test_eval_perfect_prediction_zero_metrics(scene_dir, tmp_path):
    out = tmp_path / "ev"
    scene = scene_dir / "scene000"
    assert main(["eval", "--out", str(out), "--pred", str(scene / "gt.pfm"),
                 "--gt", str(scene / "gt.pfm"),
                 "--valid", str(scene / "valid.pfm")]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics) == {"epe", "d1", "rmse", "mae", "irmse", "imae"}
    assert all(v == 0.0 for v in metrics.values())


def test_eval_corrupt_pfm_is_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.pfm"
    bad.write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 48)
    assert main(["eval", "--out", str(tmp_path / "o"), "--pred", str(bad),
                 "--gt", str(bad)]) == 2


def test_train_writes_checkpoint_and_curve(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--steps", "1",
                 "--n-points", "15", "--seed", "2"]
                + TINY_SCENE + TINY_MODEL) == 0
    assert (out / "model.bin").exists()
    lines = (out / "curve.csv").read_text().strip().splitlines()
    assert lines[0] == "step,loss,epe,d1,rmse,mae,irmse,imae"
    assert len(lines) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["train"]["steps"] == 1


def test_gradcheck_all_ops_pass(capsys):
    assert main(["gradcheck", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "conv2d" in out and "cspn" in out
    assert "ok" in out


def test_ablate_single_iteration(scene_dir, checkpoint, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "--out", str(out), "--checkpoint", str(checkpoint),
                 "--iters", "1", "--scenes", "2", "--points", "15",
                 "--jobs", "1"] + TINY_SCENE + TINY_MODEL) == 0
    lines = (out / "ablation.csv").read_text().strip().splitlines()
    assert lines[0] == "iters,epe,d1,rmse,mae,irmse,imae"
    assert len(lines) == 2


def test_turbo_colormap_range():
    ramp = np.linspace(0.0, 1.0, 64)
    rgb = turbo_colormap(ramp)
    assert rgb.shape == (3, 64)
    assert rgb.min() >= 0.0 and rgb.max() <= 1.0
    # low end is blue-dominant, high end red-dominant
    assert rgb[2, 8] > rgb[0, 8]
    assert rgb[0, -1] > rgb[2, -1]
