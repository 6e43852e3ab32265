"""End-to-end tests of the tactile_cli subcommands on a tiny synthetic corpus."""
import io
import json

import pytest

import reports
import tactile_cli
from config import LayoutConfig, RunConfig
from storage import load_dataset, load_manifest


@pytest.fixture(autouse=True)
def no_svg(monkeypatch):
    monkeypatch.setattr(reports, "render_svg", lambda fig, path: False)


def run(*argv):
    return tactile_cli.main([str(a) for a in argv])


# ============================================================================
# EXIT CODES
# ============================================================================

def test_usage_errors_exit_1(capsys):
    assert run() == 1
    assert run("train", "--dataset", "x.npz") == 1
    assert run("simulate", "--velocities", "20,fast") == 1
    assert "error:" in capsys.readouterr().err


def test_missing_manifest_exits_2(tmp_path):
    assert run("preprocess", "--manifest", tmp_path / "nope.json", "--task", "texture") == 2
    assert run("detect", "--manifest", tmp_path / "nope.json") == 2


def test_eval_needs_run_directory(tmp_path):
    assert run("eval", "--run-dir", tmp_path) == 2


def test_detect_needs_input():
    assert run("detect") == 1


# ============================================================================
# SIMULATE -> PREPROCESS -> TRAIN -> EVAL -> REPORT
# ============================================================================

@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert tactile_cli.main(["simulate", "--out", str(out), "--textures", "a,d", "--velocities", "20,40",
                             "--drags-per-cell", "4", "--seed", "3"]) == 0
    return out


def test_simulate_writes_manifest(corpus):
    manifest = load_manifest(corpus / tactile_cli.MANIFEST_FILE)
    assert len(manifest.records) == 2 * 2 * 4
    assert {r.texture for r in manifest.records} == {"a", "d"}
    assert all((corpus / r.path).is_file() for r in manifest.records)


def test_simulate_is_reproducible(corpus, tmp_path):
    assert run("simulate", "--out", tmp_path, "--textures", "a,d", "--velocities", "20,40",
               "--drags-per-cell", "4", "--seed", "3") == 0
    assert (tmp_path / "manifest.json").read_bytes() == (corpus / "manifest.json").read_bytes()


def test_train_eval_report_flow(corpus, tmp_path, capsys):
    assert run("preprocess", "--manifest", corpus / "manifest.json", "--task", "texture", "--out", tmp_path) == 0
    dataset_path = tmp_path / "windows_texture_500.npz"
    assert load_dataset(dataset_path).window_size == 500

    run_dir = tmp_path / "run"
    assert run("train", "--task", "texture", "--dataset", dataset_path, "--run-dir", run_dir,
               "--held-out", "20,40", "--epochs", "1", "--seed", "1") == 0
    for name in ("run_config.yaml", "split_plan.json", "report.json", "model_fold0.mtck", "model_fold1.mtck",
                 "curves_fold0.csv", "texture_folds.csv", "confusion_20mm_s.csv"):
        assert (run_dir / name).is_file(), name
    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    assert [f["held_out_velocity"] for f in report["folds"]] == [20.0, 40.0]
    assert "Mean accuracy" in capsys.readouterr().out

    trained = (run_dir / "report.json").read_bytes()
    assert run("eval", "--run-dir", run_dir) == 0
    assert (run_dir / "report.json").read_bytes() == trained
    assert run("report", "--run-dir", run_dir) == 0


def test_velocity_run_keeps_baseline_inputs(corpus, tmp_path):
    manifest = corpus / "manifest.json"
    assert run("preprocess", "--manifest", manifest, "--task", "velocity", "--history", "0.1", "--out", tmp_path) == 0
    assert run("preprocess", "--manifest", manifest, "--task", "localize", "--out", tmp_path) == 0

    run_dir = tmp_path / "velocity"
    position = tmp_path / "windows_localize_100.npz"
    assert run("train", "--task", "velocity", "--dataset", tmp_path / "windows_velocity_200.npz",
               "--position-dataset", position, "--run-dir", run_dir, "--cv-rounds", "2", "--epochs", "1",
               "--seed", "1") == 0
    assert RunConfig.load_yaml(run_dir / "run_config.yaml").position_dataset_path == str(position)
    assert LayoutConfig.load_yaml(run_dir / tactile_cli.LAYOUT_FILE) == LayoutConfig()

    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    assert "position_baseline" in report
    assert [b["bin_mm_s"] for b in report["bins"]["0.1"]] == [20.0, 40.0]

    trained = (run_dir / "report.json").read_bytes()
    assert run("eval", "--run-dir", run_dir) == 0
    assert (run_dir / "report.json").read_bytes() == trained


def test_train_rejects_mismatched_window(corpus, tmp_path):
    assert run("preprocess", "--manifest", corpus / "manifest.json", "--task", "texture", "--window", "200",
               "--out", tmp_path) == 0
    assert run("train", "--task", "texture", "--dataset", tmp_path / "windows_texture_200.npz",
               "--run-dir", tmp_path / "run", "--epochs", "1") == 2


# ============================================================================
# DETECT
# ============================================================================

def test_detect_on_tap_manifest(tmp_path, capsys):
    taps = tmp_path / "taps"
    assert run("simulate", "--kind", "tap", "--out", taps, "--taps-per-cell", "3") == 0
    assert len(load_manifest(taps / "manifest.json").records) == 3 * 4 * 3

    run_dir = tmp_path / "detect"
    assert run("detect", "--manifest", taps / "manifest.json", "--run-dir", run_dir) == 0
    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    assert report["task"] == "detect"
    assert set(report["table"]) == {"10 mm/s", "55 mm/s", "100 mm/s"}
    assert (run_dir / "response_times.csv").is_file()
    assert (run_dir / "response_time_table.csv").is_file()
    assert "Relative response time" in capsys.readouterr().out


def test_detect_without_taps(corpus, tmp_path):
    assert run("detect", "--manifest", corpus / "manifest.json", "--run-dir", tmp_path) == 2


def test_detect_stream(monkeypatch, capsys):
    values = [1241] * 30 + [1300] * 5 + [1241] * 30 + [1300] * 2
    monkeypatch.setattr("sys.stdin", io.StringIO("\n".join(str(v) for v in values) + "\n"))
    assert run("detect", "--stream") == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("contact")]
    assert [l.split()[3] for l in lines] == ["30", "65"]


def test_detect_stream_rejects_text(monkeypatch):
    monkeypatch.setattr("sys.stdin", io.StringIO("1241\nnoise\n"))
    assert run("detect", "--stream") == 2
