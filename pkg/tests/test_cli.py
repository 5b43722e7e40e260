import json
import os
from pathlib import Path

import numpy as np
import pytest

from hiertraj.cli import main
from hiertraj.scene import load_scene

ENC_FLAGS = ["--epochs", "2", "--lr", "2e-3", "--d-model", "8", "--modes", "2"]
RL_FLAGS = ["--updates", "2", "--rollout-steps", "48", "--minibatch-size", "48",
            "--epochs-per-update", "2", "--d-model", "8", "--lr", "1e-3"]


def read_bytes_map(directory: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Scenes plus tiny trained checkpoints shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    scenes = root / "scenes"
    assert main(["gen", "--kind", "mixed", "--count", "4", "--agents", "2",
                 "--seed", "7", "--out", str(scenes)]) == 0
    enc = root / "enc"
    assert main(["train-encoder", "--scenes", str(scenes), "--seed", "1",
                 "--out", str(enc), *ENC_FLAGS]) == 0
    rl = root / "rl"
    assert main(["train-rl", "--scenes", str(scenes), "--seed", "2",
                 "--out", str(rl), *RL_FLAGS]) == 0
    return root


def test_gen_writes_scenes_and_manifest(workdir):
    scenes = workdir / "scenes"
    names = sorted(p.name for p in scenes.iterdir())
    assert "gen_manifest.json" in names
    scene_files = [n for n in names if n.startswith("scene_")]
    assert len(scene_files) == 4
    manifest = json.loads((scenes / "gen_manifest.json").read_text())
    assert manifest["run"]["seed"] == 7
    assert manifest["files"] == scene_files
    load_scene(str(scenes / scene_files[0]))  # parses


def test_gen_byte_reproducible(tmp_path):
    out = tmp_path / "g"
    argv = ["gen", "--kind", "straight", "--count", "2", "--seed", "5", "--out", str(out)]
    assert main(argv) == 0
    first = read_bytes_map(out)
    assert main(argv) == 0
    assert read_bytes_map(out) == first


def test_train_encoder_outputs(workdir):
    enc = workdir / "enc"
    ckpt = json.loads((enc / "encoder.json").read_text())
    assert ckpt["format"] == "encoder-checkpoint/v1"
    assert ckpt["config"]["d_model"] == 8
    assert ckpt["config"]["n_modes"] == 2
    lines = (enc / "encoder_losses.csv").read_text().splitlines()
    assert lines[0].startswith("# run:")
    assert lines[1] == "epoch,loss,fde"
    assert len(lines) == 2 + 2  # two epochs


def test_train_rl_outputs(workdir):
    rl = workdir / "rl"
    ckpt = json.loads((rl / "policy.json").read_text())
    assert ckpt["format"] == "policy-checkpoint/v1"
    assert ckpt["config"]["ppo"]["policy_arch"] == "transformer"
    lines = (rl / "rl_log.csv").read_text().splitlines()
    assert lines[1] == ("update,mean_return,policy_loss,value_loss,entropy,"
                        "clip_fraction,collision_rate,goal_hit_rate")
    assert len(lines) == 2 + 2
    assert (rl / "trace_sample.csv").exists()


def test_predict_outputs_and_shapes(workdir, tmp_path):
    scenes = sorted((workdir / "scenes").glob("scene_*.json"))
    out = tmp_path / "pred"
    assert main(["predict", "--scene", str(scenes[0]),
                 "--encoder-ckpt", str(workdir / "enc" / "encoder.json"),
                 "--rl-ckpt", str(workdir / "rl" / "policy.json"),
                 "--seed", "3", "--out", str(out)]) == 0
    preds = json.loads((out / "predictions.json").read_text())
    assert preds["format"] == "predictions/v1"
    for agent in preds["agents"]:
        trajs = np.asarray(agent["trajectories"])
        assert trajs.shape == (2, 30, 2)  # n_modes=2 from the checkpoint
        assert abs(sum(agent["probabilities"]) - 1.0) < 1e-9
    raw = json.loads((out / "key_positions_raw.json").read_text())
    cal = json.loads((out / "key_positions_calibrated.json").read_text())
    assert raw["format"] == cal["format"] == "key-positions/v1"
    subs = json.loads((out / "subscenes.json").read_text())
    assert len(subs["membership_per_mode"]) == 2


def test_predict_resumable_from_key_positions(workdir, tmp_path):
    scenes = sorted((workdir / "scenes").glob("scene_*.json"))
    first = tmp_path / "p1"
    argv = ["predict", "--scene", str(scenes[0]),
            "--encoder-ckpt", str(workdir / "enc" / "encoder.json"),
            "--rl-ckpt", str(workdir / "rl" / "policy.json"),
            "--seed", "3", "--out", str(first)]
    assert main(argv) == 0
    resumed = tmp_path / "p2"
    assert main(["predict", "--scene", str(scenes[0]),
                 "--encoder-ckpt", str(workdir / "enc" / "encoder.json"),
                 "--rl-ckpt", str(workdir / "rl" / "policy.json"),
                 "--key-positions", str(first / "key_positions_raw.json"),
                 "--seed", "3", "--out", str(resumed)]) == 0
    a = json.loads((first / "predictions.json").read_text())
    b = json.loads((resumed / "predictions.json").read_text())
    assert a["agents"] == b["agents"]


def test_predict_checkpoint_mismatch_rejected(workdir, tmp_path, capsys):
    scenes = sorted((workdir / "scenes").glob("scene_*.json"))
    code = main(["predict", "--scene", str(scenes[0]),
                 "--encoder-ckpt", str(workdir / "enc" / "encoder.json"),
                 "--rl-ckpt", str(workdir / "rl" / "policy.json"),
                 "--modes", "6", "--out", str(tmp_path / "x")])
    assert code == 2
    err = capsys.readouterr().err.strip()
    payload = json.loads(err)
    assert payload["error"] == "validation"
    assert "n_modes" in payload["message"]


def test_eval_ground_truth_predictions_are_perfect(workdir, tmp_path, capsys):
    scenes = sorted((workdir / "scenes").glob("scene_*.json"))
    scene = load_scene(str(scenes[0]))
    agents = []
    for a in scene.agents:
        gt = a.future_gt[:, 1:3]
        agents.append({"id": a.id, "trajectories": [gt.tolist()],
                       "probabilities": [1.0]})
    pred_path = tmp_path / "gt_preds.json"
    pred_path.write_text(json.dumps({"format": "predictions/v1", "agents": agents}))
    out = tmp_path / "metrics"
    assert main(["eval", "--predictions", str(pred_path),
                 "--scenes", str(scenes[0]), "--out", str(out)]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert report["minADE"] == 0.0
    assert report["minFDE"] == 0.0
    assert report["MR"] == 0.0
    assert report["DAC"] == 1.0
    stdout = capsys.readouterr().out.strip().splitlines()[-1]
    assert json.loads(stdout)["DAC"] == 1.0


def test_eval_pairing_mismatch_is_usage_error(workdir, tmp_path):
    scenes = sorted((workdir / "scenes").glob("scene_*.json"))
    code = main(["eval", "--predictions", "a.json", "b.json",
                 "--scenes", str(scenes[0]), "--out", str(tmp_path)])
    assert code == 1


def test_plot_svg(workdir, tmp_path):
    scenes = sorted((workdir / "scenes").glob("scene_*.json"))
    out = tmp_path / "scene.svg"
    assert main(["plot", "--scene", str(scenes[0]), "--out", str(out)]) == 0
    svg = out.read_text()
    assert svg.startswith("<?xml")
    assert "<polyline" in svg and "<polygon" in svg
    assert "run:" in svg

    # byte reproducible
    before = out.read_bytes()
    assert main(["plot", "--scene", str(scenes[0]), "--out", str(out)]) == 0
    assert out.read_bytes() == before


def test_plot_with_overlays(workdir, tmp_path):
    scenes = sorted((workdir / "scenes").glob("scene_*.json"))
    pred_out = tmp_path / "pred"
    assert main(["predict", "--scene", str(scenes[1]),
                 "--encoder-ckpt", str(workdir / "enc" / "encoder.json"),
                 "--rl-ckpt", str(workdir / "rl" / "policy.json"),
                 "--out", str(pred_out)]) == 0
    out = tmp_path / "overlay.svg"
    assert main(["plot", "--scene", str(scenes[1]),
                 "--predictions", str(pred_out / "predictions.json"),
                 "--key-positions", str(pred_out / "key_positions_calibrated.json"),
                 "--out", str(out)]) == 0
    assert "<circle" in out.read_text()

    trace_out = tmp_path / "trace.svg"
    assert main(["plot", "--scene", str(scenes[0]),
                 "--trace", str(workdir / "rl" / "trace_sample.csv"),
                 "--out", str(trace_out)]) == 0


def test_missing_file_is_validation_error(tmp_path, capsys):
    code = main(["plot", "--scene", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "x.svg")])
    assert code == 2
    payload = json.loads(capsys.readouterr().err.strip())
    assert payload["error"] == "validation"


def test_malformed_scene_file_is_validation_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = main(["plot", "--scene", str(bad), "--out", str(tmp_path / "x.svg")])
    assert code == 2
    assert "line" in json.loads(capsys.readouterr().err.strip())["message"]


def test_usage_error_exit_code():
    assert main([]) == 1
    assert main(["gen"]) == 1  # missing required flags
    assert main(["frobnicate", "--out", "x"]) == 1


def test_train_encoder_byte_reproducible(workdir, tmp_path):
    scenes = workdir / "scenes"
    out = tmp_path / "enc2"
    argv = ["train-encoder", "--scenes", str(scenes), "--seed", "9",
            "--out", str(out), "--epochs", "1", "--d-model", "8", "--modes", "2"]
    assert main(argv) == 0
    first = read_bytes_map(out)
    assert main(argv) == 0
    assert read_bytes_map(out) == first
