#!/usr/bin/env python3
"""
Tests for the soh_cli command-line front end
"""

import json

import pandas as pd
import pytest

from soh_cli import main


@pytest.fixture(scope="module")
def fleet_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fleet")
    assert main(["simulate", "--cells", "3", "--cycles", "30", "--seed", "5", "--out", str(out)]) == 0
    return out


@pytest.fixture()
def loose_gate(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"pipeline": {"correlation_gate": 0.3, "library_degree": 2}}), encoding="utf-8")
    return path


def test_simulate_writes_cells_and_truth(fleet_dir):
    names = sorted(p.name for p in fleet_dir.iterdir())
    assert names == ["cell1.csv", "cell2.csv", "cell3.csv", "ground_truth.csv"]


def test_train_then_estimate(fleet_dir, tmp_path, loose_gate, capsys):
    model = tmp_path / "model.sindy-soh.json"
    code = main(["--config", str(loose_gate), "train", "--data", str(fleet_dir),
                 "--holdout", "cell3", "--out", str(model)])
    assert code == 0
    assert "SPARSE SOH MODEL" in capsys.readouterr().out

    estimates = tmp_path / "estimates.csv"
    code = main(["estimate", "--model", str(model), "--data", str(fleet_dir / "cell3.csv"), "--out", str(estimates)])
    assert code == 0
    frame = pd.read_csv(estimates)
    assert list(frame.columns) == ["cell_id", "cycle_index", "soh_est_pct"]
    assert len(frame) == 30
    assert set(frame["cell_id"]) == {"cell3"}


def test_ingest_features_and_correlate(fleet_dir, tmp_path, loose_gate):
    labels = tmp_path / "labels.csv"
    features = tmp_path / "features.csv"
    report = tmp_path / "corr.json"
    assert main(["ingest", "--data", str(fleet_dir), "--out", str(labels)]) == 0
    assert main(["features", "--data", str(fleet_dir), "--out", str(features)]) == 0
    assert main(["--config", str(loose_gate), "correlate", "--data", str(fleet_dir),
                 "--holdout", "cell3", "--out", str(report)]) == 0

    assert len(pd.read_csv(labels)) == 90
    assert list(pd.read_csv(features).columns)[2:] == ["mu", "sigma", "skew", "kur", "delta_i", "c_cv", "t_dur",
                                                       "soh_pct"]
    assert json.loads(report.read_text(encoding="utf-8"))["gate"] == 0.3


def test_evaluate_against_ground_truth(fleet_dir, tmp_path, loose_gate, capsys):
    reports = tmp_path / "reports"
    code = main(["--config", str(loose_gate), "evaluate", "--data", str(fleet_dir), "--holdout", "cell3",
                 "--truth", str(fleet_dir / "ground_truth.csv"), "--methods", "sindy,ridge",
                 "--reports-dir", str(reports)])
    assert code == 0
    assert "MAE" in capsys.readouterr().out
    saved = json.loads((reports / "evaluate_cell3.json").read_text(encoding="utf-8"))
    assert set(saved["results"]) == {"SINDy", "Ridge"}


def test_bench_on_synthetic_rows(tmp_path, capsys):
    code = main(["bench", "--train-rows", "200", "--test-rows", "10", "--repetitions", "3",
                 "--methods", "sindy,ridge", "--reports-dir", str(tmp_path)])
    assert code == 0
    assert "Test Time (ms/sample)" in capsys.readouterr().out
    timing = json.loads((tmp_path / "bench.json").read_text(encoding="utf-8"))["timing"]
    assert [entry["method_name"] for entry in timing] == ["SINDy", "Ridge"]


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "simulate" in capsys.readouterr().out


def test_missing_required_argument_is_usage_error(capsys):
    assert main(["train", "--out", "model.json"]) == 1
    assert "--data" in capsys.readouterr().err


def test_unknown_method_is_usage_error(fleet_dir, capsys):
    assert main(["evaluate", "--data", str(fleet_dir), "--holdout", "cell3", "--methods", "lasso"]) == 1
    assert "lasso" in capsys.readouterr().err


def test_evaluate_without_holdout_is_usage_error(fleet_dir):
    assert main(["evaluate", "--data", str(fleet_dir)]) == 1


def test_malformed_data_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("cell_id,cycle_index,time_s,voltage_V,current_A\nc1,0,0,abc,1.25\n", encoding="utf-8")
    assert main(["ingest", "--data", str(bad), "--out", str(tmp_path / "labels.csv")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_missing_model_file_exits_two(tmp_path, fleet_dir):
    assert main(["estimate", "--model", str(tmp_path / "absent.json"), "--data", str(fleet_dir)]) == 2
