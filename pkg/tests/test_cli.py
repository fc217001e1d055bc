import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from flowmend.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from flowmend.classifier import load_classifier
from flowmend.flow_core import read_flo, save_image
from flowmend.harness import DatasetSpec, ExperimentManifest
from flowmend.occlusion import OcclusionMask
from flowmend.reconstructor import load_autoencoder
from oracles import smooth_texture
from tiny import tiny_manifest


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.json"
    tiny_manifest().save(path)
    return str(path)


@pytest.fixture
def frames(tmp_path):
    img = smooth_texture(48, seed=3)
    save_image(img, tmp_path / "a.png")
    save_image(np.roll(img, 2, axis=1), tmp_path / "b.png")
    return str(tmp_path / "a.png"), str(tmp_path / "b.png")


def test_pairs(capsys):
    assert main(["pairs", "5", "--strategy", "apex"]) == EXIT_OK
    assert capsys.readouterr().out.split() == ["1,5"]
    assert main(["pairs", "4", "--strategy", "all_flows"]) == EXIT_OK
    assert capsys.readouterr().out.split() == ["1,2", "2,3", "3,4"]
    assert main(["pairs", "3", "--strategy", "three_frames"]) == EXIT_DATA


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--axis", "depth"])
    assert exc.value.code == 2


def test_flow_command(tmp_path, frames):
    out = tmp_path / "out"
    assert main(["flow", *frames, "--out-dir", str(out), "--size", "16", "--hsv", "flow.png"]) == EXIT_OK
    f = read_flo(out / "flow.flo")
    assert f.shape == (16, 16) and (out / "flow.png").exists()
    # window means average vectors without rescaling their length
    assert abs(float(np.median(f.u)) - 2.0) < 0.3 and abs(float(np.median(f.v))) < 0.3


def test_flow_errors(tmp_path, frames):
    assert main(["flow", frames[0], str(tmp_path / "missing.png"), "--out-dir", str(tmp_path)]) == EXIT_DATA
    assert main(["flow", *frames, "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text(json.dumps({"flow": {"iterations": 0}}))
    assert main(["flow", *frames, "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG
    (tmp_path / "ok.json").write_text(json.dumps({"flow": {"iterations": 2}}))
    assert main(["flow", *frames, "--config", str(tmp_path / "ok.json"), "--out-dir", str(tmp_path)]) == EXIT_OK


def test_occlude_command(tmp_path, frames):
    assert main(["occlude", frames[0], "--mask", "mouth", "--anchors", "14", "18", "34", "18",
                 "--out-dir", str(tmp_path), "--name", "o.png"]) == EXIT_OK
    assert OcclusionMask.load(tmp_path / "o_mask.json") == OcclusionMask.preset("mouth")
    custom = OcclusionMask("custom", ((0.0, 0.0, 0.5, 0.5),))
    custom.save(tmp_path / "m.json")
    assert main(["occlude", frames[0], "--mask", str(tmp_path / "m.json"), "--out-dir", str(tmp_path)]) == EXIT_OK
    assert main(["occlude", frames[0], "--mask", "hat"]) == EXIT_CONFIG
    assert main(["occlude", frames[0], "--anchors", "30", "5", "10", "5"]) == EXIT_DATA


def test_synth_then_directory_cv(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--per-class", "2", "--frames", "3", "--canvas", "40", "--out-dir", str(data)]) == EXIT_OK
    assert (data / "anchors.csv").exists()
    m = tiny_manifest(dataset=DatasetSpec(kind="directory", root=str(data)))
    m.save(tmp_path / "dir.json")
    assert main(["cv", "--baselines-only", "--config", str(tmp_path / "dir.json"),
                 "--out-dir", str(tmp_path / "run")]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "run" / "cv_report.csv")))
    assert rows[-1]["fold"] == "mean" and rows[-1]["n_test"] == "12"
    m2 = tiny_manifest(dataset=DatasetSpec(kind="directory", root=str(tmp_path / "absent")))
    m2.save(tmp_path / "absent.json")
    assert main(["cv", "--config", str(tmp_path / "absent.json"), "--out-dir", str(tmp_path / "x")]) == EXIT_DATA


def test_cv_and_report(tmp_path, config, capsys):
    run = tmp_path / "run"
    assert main(["cv", "--config", config, "--out-dir", str(run)]) == EXIT_OK
    for name in ("cv_report.csv", "cv_report.json", "fold_bars.csv", "manifest.json", "folds.json"):
        assert (run / name).exists()
    assert ExperimentManifest.load(run / "manifest.json") == tiny_manifest()
    capsys.readouterr()
    assert main(["report", str(run)]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("3 folds") and "reconstructed_acc" in out
    assert main(["report", str(tmp_path / "nothing")]) == EXIT_DATA


def test_seed_override(tmp_path, config):
    assert main(["cv", "--baselines-only", "--config", config, "--seed", "5", "--out-dir", str(tmp_path)]) == EXIT_OK
    saved = json.loads((tmp_path / "manifest.json").read_text())
    assert set(saved["seeds"].values()) == {5}


def test_train_commands(tmp_path, config, capsys):
    assert main(["train-ae", "--config", config, "--fold", "1", "--out-dir", str(tmp_path)]) == EXIT_OK
    assert load_autoencoder(tmp_path / "ae_fold01.ckpt").cfg == tiny_manifest().ae
    assert main(["train-cnn", "--config", config, "--out-dir", str(tmp_path)]) == EXIT_OK
    assert load_classifier(tmp_path / "cnn_fold00.ckpt").cfg == tiny_manifest().cnn
    assert (tmp_path / "cnn_fold00_history.csv").exists()
    assert main(["train-ae", "--config", config, "--fold", "3"]) == EXIT_CONFIG


def test_ablate_command(tmp_path, config):
    assert main(["ablate", "--axis", "loss", "--config", config, "--out-dir", str(tmp_path)]) == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "ablation_loss.csv")))
    assert [r[1] for r in rows[1:]] == ["mse", "wing", "endpoint"]
    assert (tmp_path / "loss_wing" / "cv_report.csv").exists()


def test_config_errors(tmp_path):
    assert main(["cv", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text("{")
    assert main(["cv", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG
    (tmp_path / "unknown.json").write_text(json.dumps({"colour": "red"}))
    assert main(["cv", "--config", str(tmp_path / "unknown.json")]) == EXIT_CONFIG


def test_sweep_size(tmp_path, config):
    assert main(["sweep-size", "--config", config, "--sizes", "8,16,64", "--seeds", "1",
                 "--out-dir", str(tmp_path)]) == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "size_sweep.csv")))
    assert [r[0] for r in rows[1:]] == ["8", "16"]
    assert main(["sweep-size", "--config", config, "--sizes", "8,x"]) == EXIT_CONFIG


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "flowmend", "pairs", "4", "--strategy", "mid_flows"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0
    assert res.stdout.split() == ["1,2", "1,3", "1,4", "2,3", "2,4", "3,4"]
