from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from emfnet.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, build_parser, main
from emfnet.data import SegmentationSample, write_flat

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = ("", "train", "predict", "gradcheck", "synth", "folds", "eval")
TINY_SETS = [
    "network.depth=2",
    "network.base_channels=4",
    "network.pcam_paths=2",
    "data.size=[16,16]",
    "data.synth_count=8",
    "data.synth_test=2",
    "train.batch_size=4",
]


def tiny_train(out, *extra):
    args = ["train", "--data", "synth", "--epochs", "2", "--out", str(out)]
    for s in TINY_SETS + list(extra):
        args += ["--set", s]
    return main(args)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert tiny_train(out) == EXIT_OK
    return out


def render_help(command: str) -> str:
    parser = build_parser()
    if not command:
        return parser.format_help()
    sub = next(a for a in parser._actions if a.dest == "command")
    return sub.choices[command].format_help()


@pytest.mark.parametrize("command", COMMANDS)
def test_help_matches_golden(command, monkeypatch):
    monkeypatch.setenv("COLUMNS", "80")
    name = f"help_{command or 'main'}.txt"
    text = render_help(command)
    if os.environ.get("EMFNET_REGEN_GOLDEN"):
        (GOLDEN / name).write_text(text)
    assert text == (GOLDEN / name).read_text()


# ---------------------------------------------------------------------------
# train


def test_train_writes_outputs(run_dir, capsys):
    for name in ("config.json", "final.pemf", "best.pemf", "history.csv", "metrics_epoch0002.csv"):
        assert (run_dir / name).exists(), name
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["network"]["depth"] == 2 and cfg["train"]["epochs"] == 2


def test_train_without_tv(tmp_path):
    assert tiny_train(tmp_path, "loss.lambda_tv=0") == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "history.csv").open()))
    assert rows and all(float(r["tv"]) == 0.0 for r in rows)


def test_train_missing_dataset(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_train_reports_all_config_problems(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"epochs": 0, "lr": "fast"}, "network": {"depth": 1}, "bogus": 1}))
    assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    for word in ("train.epochs", "train.lr", "depth", "bogus"):
        assert word in err, word


def test_train_bad_override(capsys):
    assert main(["train", "--set", "nonsense"]) == EXIT_CONFIG
    assert "nonsense" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# predict


def _write_png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)


def test_predict_binary_and_deterministic(run_dir, tmp_path, rng):
    src = tmp_path / "in.png"
    _write_png(src, rng.integers(0, 256, (500, 500)))
    outs = []
    for k in range(2):
        out = tmp_path / f"out{k}.png"
        args = ["predict", "--checkpoint", str(run_dir / "final.pemf"), "--input", str(src), "--output", str(out)]
        assert main(args) == EXIT_OK
        outs.append(out.read_bytes())
    mask = np.asarray(Image.open(tmp_path / "out0.png"))
    assert mask.shape == (500, 500)
    assert set(np.unique(mask)) <= {0, 255}
    assert outs[0] == outs[1]


def test_predict_errors(run_dir, tmp_path):
    args = ["predict", "--checkpoint", str(run_dir / "final.pemf"), "--input", str(tmp_path / "x.png")]
    assert main(args + ["--output", str(tmp_path / "o.png")]) == EXIT_DATA
    bogus = tmp_path / "bogus.pemf"
    bogus.write_bytes(b"nope")
    args = ["predict", "--checkpoint", str(bogus), "--input", "x", "--output", str(tmp_path / "o.png")]
    assert main(args) == EXIT_CONFIG


# ---------------------------------------------------------------------------
# synth / folds / eval


def test_synth_command(tmp_path):
    assert main(["synth", "--count", "4", "--size", "16", "--out", str(tmp_path / "d")]) == EXIT_OK
    assert len(list((tmp_path / "d" / "images").iterdir())) == 4
    assert main(["synth", "--count", "0", "--out", str(tmp_path / "e")]) == EXIT_CONFIG


def test_folds_on_163_images(tmp_path):
    z = np.zeros((1, 4, 4))
    samples = [SegmentationSample(f"b{i:03d}", z, z, "benign") for i in range(110)]
    samples += [SegmentationSample(f"m{i:03d}", z, z, "malignant") for i in range(53)]
    write_flat(samples, tmp_path / "d")
    manifest = tmp_path / "folds.csv"
    assert main(["folds", "--data", str(tmp_path / "d"), "--out", str(manifest)]) == EXIT_OK
    rows = list(csv.DictReader(manifest.open()))
    sizes = sorted(np.bincount([int(r["fold"]) for r in rows]).tolist(), reverse=True)
    assert sizes == [33, 33, 33, 32, 32]


def test_eval_uses_only_requested_fold(run_dir, tmp_path):
    data = tmp_path / "d"
    assert main(["synth", "--count", "6", "--size", "16", "--seed", "9", "--out", str(data)]) == EXIT_OK
    manifest = tmp_path / "folds.csv"
    assert main(["folds", "--data", str(data), "--k", "3", "--out", str(manifest)]) == EXIT_OK
    wanted = {r["id"] for r in csv.DictReader(manifest.open()) if r["fold"] == "1"}
    report = tmp_path / "report.csv"
    args = ["eval", "--checkpoint", str(run_dir / "final.pemf"), "--data", str(data)]
    assert main(args + ["--manifest", str(manifest), "--fold", "1", "--out", str(report)]) == EXIT_OK
    rows = list(csv.DictReader(report.open()))
    per_image = {r["id"] for r in rows if r["id"] not in ("mean", "std")}
    assert per_image == wanted
    assert main(args + ["--fold", "1", "--out", str(report)]) == EXIT_CONFIG


@pytest.mark.parametrize("name", ["fullscale.json", "synthetic.json"])
def test_shipped_configs_validate(name):
    from emfnet.cli import load_run_config

    path = Path(__file__).parents[1] / "configs" / name
    cfg = load_run_config(str(path), [])
    assert cfg.train.epochs >= 1
