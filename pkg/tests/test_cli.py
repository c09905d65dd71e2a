"""CLI behavior: config round trips, command plumbing, determinism, errors."""

import json
from pathlib import Path

import numpy as np
import pytest

from egoground.cli import RunConfig, _module_of, _thresholds, main
from egoground.network import init_model_params, load_model
from egoground.scenes import load_scene

SMOKE = {
    "n_scenes": 2,
    "steps": 2,
    "voxel_size": 0.4,
    "scene": {"force_distractors": True, "image_width": 24, "image_height": 18,
              "focal": 18.0},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(SMOKE))
    scenes = root / "scenes"
    assert main(["gen", "--config", str(cfg_path), "--out", str(scenes),
                 "--seed", "5"]) == 0
    ckpt = root / "ckpt.json"
    assert main(["train", "--config", str(cfg_path), "--scenes", str(scenes),
                 "--out", str(ckpt), "--seed", "5"]) == 0
    return {"root": root, "cfg": cfg_path, "scenes": scenes, "ckpt": ckpt}


# ---------------------------------------------------------------------------
# RunConfig
# ---------------------------------------------------------------------------


def test_run_config_defaults():
    cfg = RunConfig()
    assert (cfg.lambda_cls, cfg.lambda_box, cfg.lambda_ground, cfg.lambda_spatial) \
        == (1.0, 1.0, 1.0, 0.01)
    assert cfg.optimizer == "adam"


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(dim=0)
    with pytest.raises(ValueError):
        RunConfig(lr=-1.0)
    with pytest.raises(ValueError):
        RunConfig(lambda_spatial=-0.1)
    with pytest.raises(ValueError):
        RunConfig(optimizer="lbfgs")
    with pytest.raises(ValueError):
        RunConfig(scene={"n_cameras": 0})


def test_run_config_round_trip(tmp_path):
    cfg = RunConfig(dim=16, steps=7, lambda_spatial=0.05,
                    scene={"n_objects_min": 2, "n_objects_max": 3})
    path = tmp_path / "c.json"
    cfg.save(path)
    assert RunConfig.load(path) == cfg
    with pytest.raises(ValueError, match="unknown config fields"):
        RunConfig.from_dict({"dim": 8, "typo_field": 1})
    path.write_text("{broken")
    with pytest.raises(ValueError, match="JSON"):
        RunConfig.load(path)


def test_thresholds():
    assert _thresholds(None) == [0.25, 0.50]
    assert _thresholds(0.25) == [0.25, 0.50]
    assert _thresholds(0.4) == [0.25, 0.50, 0.4]


def test_module_grouping_covers_all_params():
    store = init_model_params(RunConfig(dim=8, heads=2, layers=1).model_config(), 0)
    groups = {_module_of(name) for name in store.names()}
    assert "other" not in groups
    assert groups == {"fusion", "text", "scoring", "qim", "rag", "decoder", "heads"}


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def test_gen_writes_loadable_scenes(workspace):
    files = sorted(workspace["scenes"].glob("*.json"))
    assert len(files) == 2
    for f in files:
        scene, instructions = load_scene(f)
        assert len(scene.objects) >= 2
        assert len(instructions) == 1


def test_gen_same_seed_identical_bytes(workspace, tmp_path):
    out2 = tmp_path / "again"
    assert main(["gen", "--config", str(workspace["cfg"]), "--out", str(out2),
                 "--seed", "5"]) == 0
    for f in sorted(workspace["scenes"].glob("*.json")):
        assert (out2 / f.name).read_bytes() == f.read_bytes()


def test_gen_bad_output_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rc = main(["gen", "--out", str(blocker / "sub")])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and err.count("\n") == 1


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_zero_steps_equals_init(workspace, tmp_path):
    ckpt = tmp_path / "init.json"
    cfg = json.loads(workspace["cfg"].read_text())
    cfg["steps"] = 0
    cfg_path = tmp_path / "cfg0.json"
    cfg_path.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(cfg_path), "--scenes",
                 str(workspace["scenes"]), "--out", str(ckpt), "--seed", "5"]) == 0
    store, model_cfg, extra = load_model(ckpt)
    ref = init_model_params(model_cfg, 5)
    for name in ref.names():
        assert np.array_equal(store[name].data, ref[name].data)
    assert extra["steps_trained"] == 0


def test_train_dumped_config_reproduces_run(workspace, tmp_path):
    # rerun from the effective config written next to the checkpoint
    dumped = workspace["ckpt"].with_name(workspace["ckpt"].stem + ".config.json")
    assert dumped.is_file()
    ckpt2 = tmp_path / "rerun.json"
    assert main(["train", "--config", str(dumped), "--scenes",
                 str(workspace["scenes"]), "--out", str(ckpt2)]) == 0
    a = json.loads(workspace["ckpt"].read_text())
    b = json.loads(ckpt2.read_text())
    assert a["params"] == b["params"]
    bin_a = workspace["ckpt"].with_suffix(".bin").read_bytes()
    bin_b = ckpt2.with_suffix(".bin").read_bytes()
    assert bin_a == bin_b


def test_train_disable_qim_step0_loss_identical(workspace, tmp_path, capsys):
    def step0_line(extra_flags, tag):
        ckpt = tmp_path / f"{tag}.json"
        assert main(["train", "--config", str(workspace["cfg"]), "--scenes",
                     str(workspace["scenes"]), "--out", str(ckpt), "--seed", "5",
                     "--steps", "1", *extra_flags]) == 0
        out = capsys.readouterr().out
        return next(line for line in out.split("\n") if line.startswith("step    0"))

    assert step0_line([], "qim_on") == step0_line(["--disable-qim"], "qim_off")


def test_train_missing_scenes_dir(tmp_path, capsys):
    rc = main(["train", "--scenes", str(tmp_path / "nowhere"), "--out",
               str(tmp_path / "c.json")])
    assert rc == 1
    assert "does not exist" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def test_eval_reports_both_thresholds(workspace, tmp_path):
    out = tmp_path / "reports"
    assert main(["eval", "--scenes", str(workspace["scenes"]), "--checkpoint",
                 str(workspace["ckpt"]), "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert names == {"grounding_ap25.json", "grounding_ap25.txt",
                     "grounding_ap50.json", "grounding_ap50.txt",
                     "detection_ap25.json", "detection_ap25.txt",
                     "detection_ap50.json", "detection_ap50.txt"}
    data = json.loads((out / "grounding_ap25.json").read_text())
    assert data["iou_thresh"] == 0.25
    assert 0.0 <= data["buckets"]["overall"] <= 1.0


def test_eval_deterministic_and_extra_iou(workspace, tmp_path):
    out1 = tmp_path / "r1"
    out2 = tmp_path / "r2"
    for out in (out1, out2):
        assert main(["eval", "--scenes", str(workspace["scenes"]), "--checkpoint",
                     str(workspace["ckpt"]), "--out", str(out), "--iou", "0.4"]) == 0
    assert (out1 / "grounding_ap40.json").is_file()
    for p in sorted(out1.iterdir()):
        assert p.read_bytes() == (out2 / p.name).read_bytes()


def test_eval_missing_checkpoint(workspace, tmp_path, capsys):
    rc = main(["eval", "--scenes", str(workspace["scenes"]), "--checkpoint",
               str(tmp_path / "none.json"), "--out", str(tmp_path / "r")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error:")


# ---------------------------------------------------------------------------
# heatmap
# ---------------------------------------------------------------------------


def test_heatmap_command(workspace, tmp_path):
    scene_file = sorted(workspace["scenes"].glob("*.json"))[0]
    prefix = tmp_path / "heat"
    assert main(["heatmap", "--scene", str(scene_file), "--checkpoint",
                 str(workspace["ckpt"]), "--view", "1", "--out", str(prefix)]) == 0
    ppm = prefix.with_suffix(".ppm")
    csv_path = prefix.with_suffix(".csv")
    assert ppm.read_bytes().startswith(b"P6\n24 18\n255\n")
    scene, _ = load_scene(scene_file)
    rows = csv_path.read_text().strip().split("\n")
    # row count equals the voxel count announced in the PPM pairing
    from egoground.scenes import StubEmbeddings
    from egoground.train import prepare_scene
    batch = prepare_scene(scene, [], StubEmbeddings(), 0.4, 6)
    assert len(rows) == 1 + len(batch.voxels)


def test_heatmap_view_out_of_range(workspace, tmp_path, capsys):
    scene_file = sorted(workspace["scenes"].glob("*.json"))[0]
    rc = main(["heatmap", "--scene", str(scene_file), "--checkpoint",
               str(workspace["ckpt"]), "--view", "9", "--out",
               str(tmp_path / "h")])
    assert rc == 1
    assert "out of range" in capsys.readouterr().err


def test_unknown_command_rejected():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
