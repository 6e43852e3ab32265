"""Tests for JSON/CSV emission and run-directory rendering."""
import json

import numpy as np
import pandas as pd
import plotly.graph_objects as go
import pytest

import reports
from errors import DataError


@pytest.fixture(autouse=True)
def no_svg(monkeypatch):
    monkeypatch.setattr(reports, "render_svg", lambda fig, path: False)


def texture_report():
    confusion = np.diag([3, 3, 2, 3])
    confusion[2, 1] = 1
    return {
        "task": "texture",
        "folds": [
            {"held_out_velocity": 20.0, "accuracy": 11 / 12, "adjacency_share": 1.0, "n_test": 12,
             "confusion": confusion},
            {"held_out_velocity": 40.0, "accuracy": 1.0, "adjacency_share": None, "n_test": 12,
             "confusion": np.diag([3, 3, 3, 3])},
        ],
        "summary": {"mean_accuracy": np.float64(23 / 24)},
    }


def test_to_jsonable_converts_numpy():
    out = reports.to_jsonable({1: np.int64(3), "a": np.arange(3), "b": (np.float32(0.5), float("nan")),
                               "f": pd.DataFrame({"x": [1, 2]})})
    assert out == {"1": 3, "a": [0, 1, 2], "b": [0.5, None], "f": [{"x": 1}, {"x": 2}]}
    json.dumps(out)


def test_write_json_is_canonical(tmp_path):
    reports.write_json(tmp_path / "a.json", {"b": 1, "a": np.float64(2.0)})
    reports.write_json(tmp_path / "b.json", {"a": 2.0, "b": np.int32(1)})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert reports.read_json(tmp_path / "a.json") == {"a": 2.0, "b": 1}


def test_read_json_errors(tmp_path):
    with pytest.raises(DataError):
        reports.read_json(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{", encoding="utf-8")
    with pytest.raises(DataError, match="malformed"):
        reports.read_json(tmp_path / "bad.json")


def test_render_texture_run(tmp_path):
    reports.write_json(tmp_path / reports.REPORT_FILE, texture_report())
    reports.write_csv(pd.DataFrame({"epoch": [0, 1], "train_loss": [1.4, 1.1], "val_loss": [1.3, 1.2]}),
                      tmp_path / "curves_fold0.csv")
    written = {p.name for p in reports.render_run(tmp_path)}
    assert {"confusion_20mm_s.csv", "confusion_40mm_s.csv", "texture_folds.csv"} <= written
    folds = pd.read_csv(tmp_path / "texture_folds.csv")
    assert folds["held_out_velocity"].tolist() == [20.0, 40.0]
    confusion = pd.read_csv(tmp_path / "confusion_20mm_s.csv", index_col=0)
    assert confusion.loc["c", "b"] == 1


def test_render_velocity_and_detect_runs(tmp_path):
    velocity = {
        "task": "velocity",
        "table": {"0.1 s": {"20": "1.0 / 0.5", "25": "-"}},
        "bins": {"0.1": [{"bin_mm_s": 20.0, "mean_error": 1.0, "std_error": 0.5, "n": 4}]},
    }
    reports.write_json(tmp_path / reports.REPORT_FILE, velocity)
    reports.render_run(tmp_path)
    table = pd.read_csv(tmp_path / "velocity_table.csv", index_col=0)
    assert table.loc["0.1 s", "25"] == "-"
    assert pd.read_csv(tmp_path / "velocity_bins.csv")["history_s"].tolist() == [0.1]

    detect = {
        "task": "detect",
        "table": {"55 mm/s": {"0 mm": "1.8 (0.2)"}},
        "cells": [{"velocity_mm_s": 55.0, "distance_mm": 0.0, "mean_ms": 1.8, "cell": "1.8 (0.2)"}],
    }
    reports.write_json(tmp_path / reports.REPORT_FILE, detect)
    reports.render_run(tmp_path)
    assert pd.read_csv(tmp_path / "response_time_table.csv", index_col=0).loc["55 mm/s", "0 mm"] == "1.8 (0.2)"


def test_render_unknown_task(tmp_path):
    reports.write_json(tmp_path / reports.REPORT_FILE, {"task": "roughness"})
    with pytest.raises(DataError, match="unknown task"):
        reports.render_run(tmp_path)


def test_svg_failure_is_tolerated(tmp_path, monkeypatch, caplog):
    monkeypatch.undo()

    def broken(self, *args, **kwargs):
        raise ValueError("kaleido missing")

    monkeypatch.setattr(go.Figure, "to_image", broken)
    with caplog.at_level("WARNING"):
        ok = reports.render_svg(reports.confusion_figure(np.eye(4), "x"), tmp_path / "x.svg")
    assert ok is False
    assert not (tmp_path / "x.svg").exists()
    assert "SVG export unavailable" in caplog.text
