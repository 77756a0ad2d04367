#!/usr/bin/env python3
"""
CLI Tests: subcommands, run artifacts and exit codes
"""

import csv
import json
import os
import sys

import pytest

# Add src directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import run
from src.cli import commands
from src.cli.schema import ABLATION_GRID, default_config, parse_run_config
from src.errors import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, ConfigurationError, NumericalError, exit_code_for
from src.storage.artifacts import CheckpointStore, DatasetStore, MetricsLog, ReportStore, SampleStore

TINY_NET = {"width": 16, "depth": 2, "embed_dim": 8, "embed_max_log2": 4.0, "guidance_hidden": 8}


def _write_config(tmp_path, **overrides):
    config = {
        "task": "shift",
        "model_kind": "rmflow",
        "train": {"iterations": 6, "batch_size": 16, "lr": 1e-3, "log_every": 3},
        "net": TINY_NET,
        "n_eval_samples": 500,
        **overrides,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


@pytest.fixture
def trained_run(tmp_path):
    """Run directory of a tiny shift-task training"""
    out = tmp_path / "run"
    assert run.main(["train", "--config", str(_write_config(tmp_path)), "--out", str(out)]) == EXIT_OK
    return out


# ========== print-default-config ==========

def test_print_default_config_emits_full_json(capsys):
    assert run.main(["print-default-config", "gmm"]) == EXIT_OK
    config = json.loads(capsys.readouterr().out)
    assert config["task"] == "gmm"
    assert config["loss"]["lambda1"] == 0.1 and config["loss"]["lambda2"] == 0.0
    assert config["train"]["iterations"] == 100_000 and config["train"]["batch_size"] == 256
    assert config["interpolant"]["sigma"] < config["interpolant"]["sigma_min"]
    assert config["lambda1_grid"] == ABLATION_GRID


def test_guided_defaults_enable_guidance_regularizer():
    assert default_config("lorenz_event").loss.lambda2 == 1e-4
    assert default_config("lorenz").loss.lambda2 == 0.0


# ========== train ==========

def test_train_writes_run_artifacts(trained_run):
    for name in (commands.CHECKPOINT_FILE, commands.METRICS_FILE, commands.ECHO_FILE):
        assert (trained_run / name).exists()
    rows = MetricsLog.read(trained_run / commands.METRICS_FILE)
    assert len(rows) == 6
    checkpoint = CheckpointStore.load(trained_run / commands.CHECKPOINT_FILE)
    assert checkpoint.step == 6 and checkpoint.model_kind == "rmflow"


def test_missing_lambda1_defaults_and_is_echoed(tmp_path):
    out = tmp_path / "run"
    assert run.main(["train", "--config", str(_write_config(tmp_path)), "--out", str(out), "--seed", "7"]) == 0
    echo = json.loads((out / commands.ECHO_FILE).read_text())
    assert echo["loss"]["lambda1"] == 0.1
    assert echo["seed"] == 7 and echo["train"]["seed"] == 7


def test_explicit_lambda1_survives_defaults():
    cfg = parse_run_config({"task": "gmm", "loss": {"lambda1": 2.5}})
    assert cfg.loss.lambda1 == 2.5 and cfg.loss.lambda2 == 0.0


def test_trajectory_run_writes_dataset(tmp_path):
    out = tmp_path / "run"
    config = _write_config(
        tmp_path,
        task="fhn",
        task_options={"n_train": 16, "n_test": 8},
        train={"iterations": 2, "batch_size": 4},
    )
    assert run.main(["train", "--config", str(config), "--out", str(out)]) == EXIT_OK
    data, sidecar = DatasetStore.load(out / "dataset.csv")
    assert data.shape[0] == 16
    assert "standardizer" in sidecar and "event_rate" in sidecar


# ========== configuration errors ==========

def test_invalid_configs_exit_with_code_2(tmp_path):
    too_noisy = _write_config(tmp_path, interpolant={"sigma": 2e-3, "sigma_min": 1e-3})
    assert run.main(["train", "--config", str(too_noisy)]) == EXIT_CONFIG

    equal_noise = _write_config(tmp_path, interpolant={"sigma": 1e-3, "sigma_min": 1e-3})
    assert run.main(["train", "--config", str(equal_noise)]) == EXIT_CONFIG

    unknown_field = _write_config(tmp_path, learning_rate=0.1)
    assert run.main(["train", "--config", str(unknown_field)]) == EXIT_CONFIG

    unknown_task = _write_config(tmp_path, task="swiss_roll")
    assert run.main(["train", "--config", str(unknown_task)]) == EXIT_CONFIG

    assert run.main(["train", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_config_error_names_the_field():
    with pytest.raises(ConfigurationError, match="train.batch_size"):
        parse_run_config({"task": "gmm", "train": {"batch_size": 0}})


def test_meanflow_allows_equal_noise_levels():
    cfg = parse_run_config({
        "task": "gmm",
        "model_kind": "meanflow",
        "interpolant": {"sigma": 1e-3, "sigma_min": 1e-3},
    })
    assert cfg.sampler.mode == "meanflow"


def test_exit_code_mapping(monkeypatch, tmp_path):
    assert exit_code_for(ConfigurationError("x")) == EXIT_CONFIG
    assert exit_code_for(NumericalError("x")) == EXIT_NUMERIC
    assert exit_code_for(RuntimeError("x")) == 1

    def diverge(*args, **kwargs):
        raise NumericalError("loss is NaN")

    monkeypatch.setattr(commands, "cmd_train", diverge)
    assert run.main(["train", "--config", str(_write_config(tmp_path))]) == EXIT_NUMERIC


# ========== sample / eval ==========

def test_sample_writes_provenance(trained_run):
    checkpoint = trained_run / commands.CHECKPOINT_FILE
    out = trained_run / "samples.csv"
    assert run.main(["sample", "--checkpoint", str(checkpoint), "--n", "50", "--out", str(out)]) == EXIT_OK
    samples, contexts, provenance = SampleStore.load(out)
    assert samples.shape == (50, 1)
    assert contexts is None
    assert provenance["checkpoint_sha256"] == commands.file_digest(checkpoint)
    assert provenance["mode"] == "rmflow" and provenance["nfe"] == 1


def test_sample_is_reproducible(trained_run):
    checkpoint = str(trained_run / commands.CHECKPOINT_FILE)
    a, b = trained_run / "a.csv", trained_run / "b.csv"
    for path in (a, b):
        run.main(["sample", "--checkpoint", checkpoint, "--n", "20", "--seed", "3", "--out", str(path)])
    assert a.read_text() == b.read_text()


def test_multi_step_rmflow_is_rejected(trained_run):
    checkpoint = str(trained_run / commands.CHECKPOINT_FILE)
    assert run.main(["sample", "--checkpoint", checkpoint, "--n", "10", "--nfe", "2"]) == EXIT_CONFIG
    assert run.main(["sample", "--checkpoint", checkpoint, "--n", "10", "--nfe", "2", "--mode", "meanflow",
                     "--out", str(trained_run / "mf.csv")]) == EXIT_OK


def test_missing_checkpoint_exits_with_code_2(tmp_path):
    assert run.main(["eval", "--checkpoint", str(tmp_path / "nope.json")]) == EXIT_CONFIG


def test_eval_writes_report_and_histograms(trained_run, capsys):
    checkpoint = str(trained_run / commands.CHECKPOINT_FILE)
    out = trained_run / "eval"
    assert run.main(["eval", "--checkpoint", checkpoint, "--n", "500", "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report_rmflow_nfe1.json").read_text())
    assert report == json.loads(capsys.readouterr().out)
    assert report["task"] == "shift" and report["n_samples"] == 500
    assert report["checkpoint_sha256"] == commands.file_digest(trained_run / commands.CHECKPOINT_FILE)
    assert ReportStore.load_report(out / "report_rmflow_nfe1.json") == report
    with open(out / "hist_rmflow_nfe1.csv", newline="") as f:
        header = next(csv.reader(f))
    assert header == ["center_1", "p", "q"]
    assert not list(out.glob("hist_*_p.csv"))


def test_eval_nfe_sweep_rows(trained_run):
    checkpoint = str(trained_run / commands.CHECKPOINT_FILE)
    report = commands.cmd_eval(checkpoint, 300, mode="meanflow", out=str(trained_run / "sweep"),
                               nfe_sweep=[2, 4])
    assert [row["nfe"] for row in report["rows"]] == [1, 2, 4]


# ========== ablate ==========

def test_ablate_single_point_grid(tmp_path):
    out = tmp_path / "ablation"
    config = _write_config(tmp_path, model_kind="meanflow")
    assert run.main(["ablate", "--config", str(config), "--lambda1-grid", "0.1", "--out", str(out)]) == EXIT_OK
    with open(out / "ablation.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1
    assert list(rows[0].keys()) == commands.ABLATION_COLUMNS
    assert float(rows[0]["lambda1"]) == 0.1
    assert (out / "lambda1_0.1" / commands.CHECKPOINT_FILE).exists()
