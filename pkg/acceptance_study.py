#!/usr/bin/env python3
"""
Desk-scale acceptance runs on synthetic data.

Covers the long-running checks that stay out of the pytest suite:
    texture       held-out-velocity texture accuracy and fold ordering
    localize      learned localization against the SNR baseline
    velocity      direct regression against the position-derivative baseline
    response      tap response-time table
    reproduce     two identical pipeline runs compared byte for byte

Usage:
    python acceptance_study.py                 # everything
    python acceptance_study.py texture response  # selected studies
"""
import filecmp
import logging
import sys
import tempfile
import time
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

import experiment_harness as harness
import tactile_cli
from config import HELD_OUT_VELOCITIES_MM_S, VELOCITY_GRID_MM_S, LayoutConfig, PipelineConfig, TrainHyper
from contact_detection import response_time_study
from neural_model import ModelConfig
from sensor_sim import TEXTURE_IDS, build_layout, drag_grid, simulate_drag
from signal_pipeline import WindowDataset, build_dataset


DESK_DRAGS_PER_CELL = 40
SEED = 42


def _corpus(window_size: int, drags_per_cell: int = DESK_DRAGS_PER_CELL) -> WindowDataset:
    layout = build_layout(LayoutConfig())
    episodes = (simulate_drag(layout, tex, vel, seed)
                for tex, vel, seed in drag_grid(TEXTURE_IDS, VELOCITY_GRID_MM_S, drags_per_cell, SEED))
    return build_dataset(episodes, window_size, PipelineConfig())


def _hyper(epochs: int) -> TrainHyper:
    return TrainHyper(max_epochs=epochs)


def study_texture() -> Dict:
    """Held-out 40 mm/s >= 90%; every fold but the slowest >= 80%; slowest <= mean of the rest."""
    dataset = _corpus(500)
    plan = harness.make_held_out_velocity_splits(dataset, HELD_OUT_VELOCITIES_MM_S, 0.1, SEED, "texture")
    config = ModelConfig(task="texture", seed=SEED)
    accuracy = {}
    for fold in plan.folds:
        result = harness.train(config, fold, dataset, _hyper(20))
        report = harness.eval_texture(result.model, dataset.select_drags(fold.test))
        accuracy[fold.held_out_velocity] = report["accuracy"]
        print(f"    held out {fold.held_out_velocity:g} mm/s: {report['accuracy'] * 100:.1f}%")

    slowest = min(accuracy)
    others = [a for v, a in accuracy.items() if v != slowest]
    passed = (accuracy[40.0] >= 0.90
              and all(a >= 0.80 for a in others)
              and accuracy[slowest] <= float(np.mean(others)))
    detail = f"40 mm/s {accuracy[40.0] * 100:.1f}%, slowest {accuracy[slowest] * 100:.1f}%"
    return {"passed": passed, "detail": detail}


def study_localize() -> Dict:
    """Learned median error below the SNR baseline on the same fold; SNR exact at mic positions."""
    layout = build_layout(LayoutConfig())
    dataset = _corpus(100)
    plan = harness.make_held_out_velocity_splits(dataset, (40.0,), 0.1, SEED, "localize")
    fold = plan.folds[0]
    result = harness.train(ModelConfig(task="localize", seed=SEED), fold, dataset, _hyper(60))
    report = harness.fold_report("localize", result.model, dataset.select_drags(fold.test), layout, fold)

    exact = True
    for k, mic in enumerate(layout.mic_positions):
        window = np.zeros((100, 10))
        window[:, k] = np.sin(np.linspace(0.0, 20.0 * np.pi, 100))
        guess = harness.snr_baseline_localize(window, layout, np.ones(10))
        exact &= bool(np.hypot(*(guess - mic)) <= 1e-9)

    passed = exact and report["median_error_mm"] < report["snr_median_error_mm"]
    detail = f"learned {report['median_error_mm']:.2f} mm vs SNR {report['snr_median_error_mm']:.2f} mm"
    return {"passed": passed, "detail": detail}


def study_velocity() -> Dict:
    """Direct regression beats the position-derivative baseline at 0.10 s history."""
    velocity_set = _corpus(200)
    position_set = _corpus(100)
    plan = harness.make_velocity_cv_splits(velocity_set, 10, 0.1, SEED, "velocity")
    direct, baseline = [], []
    for fold in plan.folds[:2]:
        test = velocity_set.select_drags(fold.test)
        model = harness.train(ModelConfig(task="velocity", seed=SEED), fold, velocity_set, _hyper(30)).model
        position = harness.train(ModelConfig(task="localize", seed=SEED), fold, position_set, _hyper(60)).model
        direct.append(harness.eval_velocity(model, test, 0.10)["errors"])
        baseline.append(harness.position_baseline_errors(position, test))

    direct_median = float(np.median(np.concatenate(direct)))
    baseline_median = float(np.median(np.concatenate(baseline)))
    return {"passed": direct_median < baseline_median,
            "detail": f"direct {direct_median:.2f} mm/s vs baseline {baseline_median:.2f} mm/s"}


def study_response() -> Dict:
    """All reported cells in [1, 8] ms, non-increasing with velocity, (6 mm, 10 mm/s) missing."""
    result = response_time_study(build_layout(LayoutConfig()), base_seed=SEED)
    print(result.table.to_string())
    cells = result.cells
    shown = cells[cells["cell"] != "-"]
    in_range = bool(((shown["mean_ms"] >= 1.0) & (shown["mean_ms"] <= 8.0)).all())

    monotone = True
    for _, group in shown.groupby("distance_mm"):
        means = group.sort_values("velocity_mm_s")["mean_ms"].to_numpy()
        monotone &= bool(np.all(np.diff(means) <= 1e-9))

    missing = result.table.loc["10 mm/s", "6 mm"] == "-"
    return {"passed": in_range and monotone and missing,
            "detail": f"range {in_range}, monotone {monotone}, (6 mm, 10 mm/s) missing {missing}"}


def _pipeline(root: Path) -> List[Path]:
    episodes = root / "episodes"
    common = ["--seed", str(SEED)]
    steps = [
        ["simulate", "--out", str(episodes), "--drags-per-cell", "2", "--textures", "a,d",
         "--velocities", "20,40", *common],
        ["preprocess", "--manifest", str(episodes / "manifest.json"), "--task", "texture"],
        ["train", "--task", "texture", "--dataset", str(episodes / "windows_texture_500.npz"),
         "--run-dir", str(root / "run"), "--held-out", "20,40", "--epochs", "2", *common],
    ]
    for argv in steps:
        code = tactile_cli.main(argv)
        if code != 0:
            raise RuntimeError(f"pipeline step {argv[0]} exited with {code}")
    return sorted(p.relative_to(root) for p in root.rglob("*")
                  if p.is_file() and p.suffix in (".mtep", ".mtck", ".json", ".csv"))


def study_reproduce() -> Dict:
    """Episodes, checkpoints and reports are byte-identical across two runs."""
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        files_a, files_b = _pipeline(Path(a)), _pipeline(Path(b))
        same_set = files_a == files_b
        _, mismatch, errors = filecmp.cmpfiles(a, b, [str(p) for p in files_a], shallow=False)
    passed = same_set and not mismatch and not errors
    return {"passed": passed, "detail": f"{len(files_a)} files, {len(mismatch)} differ"}


STUDIES: Dict[str, Callable[[], Dict]] = {
    "texture": study_texture,
    "localize": study_localize,
    "velocity": study_velocity,
    "response": study_response,
    "reproduce": study_reproduce,
}


def main(argv: List[str]) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    selected = argv or list(STUDIES)
    unknown = [s for s in selected if s not in STUDIES]
    if unknown:
        print(f"unknown study: {', '.join(unknown)} (choose from {', '.join(STUDIES)})")
        return 1

    print("=" * 70)
    print("Acceptance studies on the desk-scale synthetic corpus")
    print("=" * 70)
    results = []
    for name in selected:
        print(f"\n{name}...")
        start = time.time()
        outcome = STUDIES[name]()
        outcome.update(name=name, time=time.time() - start)
        results.append(outcome)
        mark = "✓" if outcome["passed"] else "✗"
        print(f"  {mark} {outcome['detail']} ({outcome['time']:.1f}s)")

    print("\n" + "=" * 70)
    print("SUMMARY")
    print("=" * 70)
    for r in results:
        print(f"  {r['name']:<10} {'PASS' if r['passed'] else 'FAIL':<5} {r['detail']}")
    failed = sum(1 for r in results if not r["passed"])
    print(f"\n{len(results) - failed}/{len(results)} studies passed")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
