"""
Test Sensitivity Pipeline
Runs the LangGraph workflow end to end on tiny Ornstein-Uhlenbeck experiments
and checks routing, error handling and the written outputs.
"""

import csv
import json
import os
from unittest.mock import patch

import pytest

import settings
from engines.errors import BlowupLimitExceeded
from engines.harness import FitResult, MonteCarloEngine, StudyResult
from main_sensitivity import build_parser, main, overrides_from_args
from sensitivity_pipeline import SensitivityPipeline

OU_OVERRIDES = {"model": "ou", "theta": 0.0, "sigma": 0.5, "x0": [1.0], "T": 1.0, "h": 2.0 ** -5,
                "paths": 200, "batch_size": 64}


def run(command, tmp_path, **overrides):
    return SensitivityPipeline().run_pipeline(command, {**OU_OVERRIDES, "out_dir": str(tmp_path), **overrides})


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as handle:
        return list(csv.reader(handle))


def test_sens_writes_summary(tmp_path):
    state = run("sens", tmp_path, estimator="malliavin")
    assert state["pipeline_status"] == "completed"
    assert state["outputs"] == [os.path.join(str(tmp_path), "sens.json")]
    with open(state["outputs"][0], encoding="utf-8") as handle:
        summary = json.load(handle)
    assert summary["command"] == "sens"
    assert summary["seed"] == settings.DEFAULT_SEED
    assert summary["n"] == 200
    assert abs(summary["estimate"] - 0.632) < 4 * summary["stderr"] + 0.05
    assert "workers" not in summary["params"]
    assert summary["params"]["estimator"] == "malliavin"


def test_sens_finite_difference(tmp_path):
    state = run("sens", tmp_path, estimator="fd", fd_epsilon=0.1)
    assert state["pipeline_status"] == "completed"
    assert state["result"].estimate == pytest.approx(1.0 - (1.0 - 2.0 ** -5) ** 32, rel=1e-8)
    assert state["result"].total_cost == 2 * 200 * 32
    assert state["result"].extra["cost"] == 2 * 200 * 32


def test_adaptive_steps_rejected_where_runs_share_noise(tmp_path):
    for command, estimator in (("rr", "value"), ("sens", "fd")):
        state = run(command, tmp_path, estimator=estimator, step_mode="adaptive", delta=2.0 ** -5, paths=20)
        assert state["pipeline_status"] == "error"
        assert "uniform step policy" in state["error_message"]
    assert os.listdir(tmp_path) == []


def test_reruns_are_byte_identical(tmp_path):
    first = run("simulate", tmp_path / "a")
    second = run("simulate", tmp_path / "b")
    with open(first["outputs"][0], "rb") as a, open(second["outputs"][0], "rb") as b:
        assert a.read() == b.read()


def test_unknown_command_stops_pipeline(tmp_path):
    state = SensitivityPipeline().run_pipeline("optimise", {"out_dir": str(tmp_path)})
    assert state["pipeline_status"] == "error"
    assert "unknown command" in state["error_message"]
    assert state["current_step"] == "load_config"
    assert os.listdir(tmp_path) == []


def test_bad_config_file_is_reported(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"model": "ou", "pathz": 10}))
    state = SensitivityPipeline().run_pipeline("simulate", {}, str(path))
    assert state["pipeline_status"] == "error"
    assert "pathz" in state["error_message"]


def test_study_must_belong_to_command(tmp_path):
    state = run("rr", tmp_path, study="levels")
    assert state["pipeline_status"] == "error"
    assert "no study" in state["error_message"]


def test_engine_failure_skips_outputs(tmp_path):
    with patch.object(MonteCarloEngine, "run", side_effect=BlowupLimitExceeded(5, 10)):
        state = run("sens", tmp_path, estimator="isps-theta")
    assert state["pipeline_status"] == "error"
    assert state["current_step"] == "sens"
    assert "5 of 10 paths" in state["error_message"]
    assert os.listdir(tmp_path) == []


def test_study_rows_are_written_under_exact_header(tmp_path):
    fake = StudyResult([{"T": 1.0, "mean": 0.5, "variance": 2.0, "stderr": 0.1, "n": 4, "blowups": 0}],
                       FitResult(1.0, 0.0, 1.0))
    with patch("sensitivity_pipeline.variance_vs_T_study", return_value=fake) as study:
        state = run("variance-study", tmp_path)
    study.assert_called_once()
    assert state["pipeline_status"] == "completed"
    rows = read_csv(os.path.join(str(tmp_path), "variance-study.csv"))
    assert rows[0] == settings.CSV_HEADERS["variance-study"]
    assert rows[1] == ["1.0", "0.5", "2.0", "0.1", "4", "0"]
    with open(os.path.join(str(tmp_path), "variance-study.json"), encoding="utf-8") as handle:
        assert json.load(handle)["fit"] == {"slope": 1.0, "intercept": 0.0, "r2": 1.0}


def test_csv_can_be_disabled(tmp_path):
    state = run("rr", tmp_path, estimator="value", order=2, paths=20, write_csv=False)
    assert state["pipeline_status"] == "completed"
    assert os.listdir(tmp_path) == ["rr.json"]


def test_rr_command(tmp_path):
    state = run("rr", tmp_path, estimator="value", order=2, paths=50)
    assert state["pipeline_status"] == "completed"
    rows = read_csv(os.path.join(str(tmp_path), "rr.csv"))
    assert rows[0] == settings.CSV_HEADERS["rr"]
    assert len(rows) == 3


def test_mlmc_command(tmp_path):
    state = run("mlmc", tmp_path, estimator="malliavin", eps=0.1, h0=0.25, n_init=50, spring=1.0)
    assert state["pipeline_status"] == "completed"
    rows = read_csv(os.path.join(str(tmp_path), "mlmc.csv"))
    assert rows[0] == settings.CSV_HEADERS["mlmc"]
    assert [r[0] for r in rows[1:]] == [str(level) for level in range(len(rows) - 1)]


def test_parser_overrides_skip_unset_flags():
    args = build_parser().parse_args(["sens", "--model", "ou", "--x0", "1", "2", "--T", "auto"])
    overrides = overrides_from_args(args)
    assert overrides == {"model": "ou", "x0": [1.0, 2.0], "T": "auto"}


def test_cli_main(tmp_path, capsys):
    argv = ["sens", "--model", "ou", "--theta", "0", "--sigma", "0.5", "--x0", "1", "--estimator", "malliavin",
            "--paths", "100", "--T", "1", "--h", "0.03125", "--out", str(tmp_path)]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert out.startswith("sens: ")
    assert "sens.json" in out

    assert main(["rr", "--model", "ou", "--order", "9", "--paths", "10", "--out", str(tmp_path)]) == 1
    assert "order" in capsys.readouterr().err
