import csv
import json
from pathlib import Path

import numpy as np
import pytest

from stq import config as C
from stq.cli import main, run_dir_name

BLOBS = """
[run]
model = mlp
dataset = blobs
train_subset = 400
test_subset = 200
[model]
mlp_sizes = 4,8,3
[train]
mode = {mode}
epochs = 3
batch_size = 32
lr_drop_epochs = 2
[regularizer]
lam = 5
gamma = {gamma}
"""


def _train(tmp_path, capsys, mode="STQ", gamma=0.01, extra=()):
    cfg = tmp_path / f"{mode}.ini"
    cfg.write_text(BLOBS.format(mode=mode, gamma=gamma))
    out = tmp_path / "runs"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out), *extra]) == 0
    text = capsys.readouterr().out
    run = Path(text.split("run directory: ")[1].split("\n")[0])
    return run, json.loads((run / "report.json").read_text()), text


def test_config_rejects_unknown_keys():
    with pytest.raises(C.ConfigError, match="unknown key"):
        C.parse("[train]\nepoch = 3\n")
    with pytest.raises(C.ConfigError, match="unknown section"):
        C.parse("[optimizer]\nlr = 1\n")
    with pytest.raises(C.ConfigError, match="cannot parse"):
        C.parse("[train]\nepochs = many\n")
    with pytest.raises(C.ConfigError):
        C.parse("[regularizer]\ndelta = 0.5\n")


def test_config_dump_parse_round_trip():
    cfg = C.parse(BLOBS.format(mode="TWN", gamma=0.001))
    assert C.parse(C.dump(cfg)) == cfg
    assert cfg.train.mode == "TWN" and cfg.mlp_sizes == (4, 8, 3) and cfg.train.lr_drop_epochs == (2,)
    default = C.RunConfig()
    assert C.parse(C.dump(default)) == default


def test_config_documents_every_key():
    doc = C.__doc__
    for key in C.TRAIN_KEYS + C.REGULARIZER_KEYS + ("model", "dataset", "data_dir", "out_dir", "seed", "width"):
        assert key in doc


def test_run_dir_name_has_timestamp_and_hash():
    cfg = C.RunConfig()
    name = run_dir_name(cfg, now=0)
    assert name.endswith(cfg.digest()) and len(name.split("-")) == 3


def test_train_writes_artifacts_and_prints_summary(tmp_path, capsys):
    run, rep, text = _train(tmp_path, capsys)
    for name in ("config.ini", "report.json", "beta_trajectory.csv", "model.stqw", "summary.csv", "latent.npz"):
        assert (run / name).exists()
    assert "final accuracy" in text and "depths" in text and "compression ratio" in text
    assert len(rep["depth_string"].split("-")) == 2
    assert 16 <= rep["compression_ratio"] <= 32


@pytest.mark.parametrize("mode,depths,ratio", [("TWN", "2-2", 16.0), ("FP", "32-32", 1.0)])
def test_train_fixed_modes(tmp_path, capsys, mode, depths, ratio):
    _, rep, _ = _train(tmp_path, capsys, mode=mode)
    assert rep["depth_string"] == depths and rep["compression_ratio"] == ratio


def test_eval_reproduces_final_accuracy(tmp_path, capsys):
    run, rep, _ = _train(tmp_path, capsys)
    assert main(["eval", "--model", str(run / "model.stqw")]) == 0
    out = capsys.readouterr().out
    assert f"test accuracy: {rep['final_accuracy']:.2f}%" in out
    assert main(["eval", "--model", str(run), "--split", "train"]) == 0
    assert "on 400 examples" in capsys.readouterr().out


def test_config_echo_reproduces_report(tmp_path, capsys):
    run, rep, _ = _train(tmp_path, capsys, extra=("--seed", "4"))
    echo = tmp_path / "echo.ini"
    echo.write_text((run / "config.ini").read_text().replace(str(tmp_path / "runs"), str(tmp_path / "again")))
    assert main(["train", "--config", str(echo)]) == 0
    text = capsys.readouterr().out
    run2 = Path(text.split("run directory: ")[1].split("\n")[0])
    assert json.loads((run2 / "report.json").read_text()) == rep


def test_report_outputs(tmp_path, capsys):
    run, rep, _ = _train(tmp_path, capsys)
    assert main(["report", str(run)]) == 0
    assert "zero frac" in capsys.readouterr().out
    with (run / "summary.csv").open() as f:
        rows = list(csv.DictReader(f))
    assert [int(r["depth"]) for r in rows] == rep["depths"]
    assert list(rows[0]) == ["layer", "n_weights", "beta", "depth", "mu_mean", "mu_std", "mu_min", "mu_max",
                             "delta", "zero_fraction"]
    for path in (run / "histograms").glob("*.csv"):
        with path.open() as f:
            hist = list(csv.DictReader(f))
        assert list(hist[0]) == ["bin_left", "bin_right", "count"]
        layer = int(path.name.split("_")[0][5:])
        assert sum(int(h["count"]) for h in hist) == int(rows[layer]["n_weights"])
    with (run / "beta_trajectory.csv").open() as f:
        assert len(list(csv.reader(f))) == 1 + 3


def test_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nlearning_rate = 1\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.ini")]) == 2
    assert main(["eval", "--model", str(tmp_path / "nope.stqw")]) == 2
    assert main(["report", str(tmp_path / "nothing")]) == 2
    mnist = tmp_path / "mnist.ini"
    mnist.write_text(f"[run]\ndataset = mnist\ndata_dir = {tmp_path / 'empty'}\n")
    assert main(["train", "--config", str(mnist), "--out-dir", str(tmp_path / "r")]) == 2


def test_eval_truncated_model_names_offset(tmp_path, capsys):
    run, _, _ = _train(tmp_path, capsys)
    raw = (run / "model.stqw").read_bytes()
    (run / "model.stqw").write_bytes(raw[:100])
    assert main(["eval", "--model", str(run)]) == 2
    assert "offset" in capsys.readouterr().err
