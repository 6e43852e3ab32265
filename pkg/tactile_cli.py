#!/usr/bin/env python3
"""
Command-line entry point for the mic-array tactile toolkit.

Subcommands:
    simulate    generate drag (or tap) episodes and a manifest
    preprocess  turn drag episodes into a window dataset for one task
    train       fit one model per fold, evaluate, write checkpoints and reports
    eval        re-evaluate a run directory from its checkpoints
    detect      response-time study over tap episodes, or live stdin detection
    report      re-render CSV / SVG outputs of a run directory

Exit codes: 0 success, 1 usage/config, 2 data error, 3 numeric failure.
"""
import argparse
import concurrent.futures
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

import experiment_harness as harness
from config import (HISTORY_WINDOWS, TASK_DEFAULTS, VELOCITY_GRID_MM_S, LayoutConfig, PipelineConfig, RunConfig,
                    SimulationParams, TapParams, default_output_root, history_to_window)
from contact_detection import MicContactDetector, analyze_taps, stream_detect
from errors import ConfigError, DataError, TactileError
from neural_model import ModelConfig
from reports import REPORT_FILE, render_run, write_csv, write_json
from sensor_sim import TEXTURE_IDS, build_layout, drag_grid, episode_seed, simulate_drag, simulate_tap, tap_location
from signal_pipeline import WindowDataset, build_dataset
from storage import (DatasetManifest, EpisodeRecord, iter_episodes, load_checkpoint, load_dataset, load_manifest,
                     save_checkpoint, save_dataset, save_manifest, write_episode)


logger = logging.getLogger("tactile_cli")

MANIFEST_FILE = "manifest.json"
RUN_CONFIG_FILE = "run_config.yaml"
PLAN_FILE = "split_plan.json"
LAYOUT_FILE = "layout.yaml"
DESK_DRAGS_PER_CELL = 40
FULL_DRAGS_PER_CELL = 200
TAP_DISTANCES_MM = (0.0, 2.0, 4.0, 6.0)
TAP_VELOCITIES_MM_S = (10.0, 55.0, 100.0)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors as ConfigError (exit code 1)."""

    def error(self, message):
        raise ConfigError(message)


def _banner(title: str) -> None:
    print("=" * 70)
    print(title)
    print("=" * 70)


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got '{text}'") from exc


# ============================================================================
# SIMULATE
# ============================================================================

def _simulate_drag_job(job):
    out_dir, layout_cfg, params, texture, velocity, seed = job
    episode = simulate_drag(build_layout(layout_cfg), texture, velocity, seed, params)
    rel = f"episodes/{episode.episode_id}.mtep"
    digest = write_episode(Path(out_dir) / rel, episode)
    return EpisodeRecord(episode.episode_id, rel, episode.texture, episode.nominal_velocity_mm_s,
                         episode.kind, episode.rng_seed, episode.sample_rate_hz, digest)


def _simulate_tap_job(job):
    out_dir, layout_cfg, params, velocity, distance, seed, mic = job
    layout = build_layout(layout_cfg)
    location = tap_location(layout, mic, distance, np.random.default_rng(seed))
    episode = simulate_tap(layout, location, velocity, seed, params, mic)
    episode.metadata["grid_distance_mm"] = distance
    rel = f"episodes/{episode.episode_id}.mtep"
    digest = write_episode(Path(out_dir) / rel, episode)
    return EpisodeRecord(episode.episode_id, rel, episode.texture, episode.nominal_velocity_mm_s,
                         episode.kind, episode.rng_seed, episode.sample_rate_hz, digest)


def cmd_simulate(args) -> int:
    out_dir = Path(args.out) if args.out else default_output_root() / "episodes"
    layout_cfg = LayoutConfig.load_yaml(args.layout_config) if args.layout_config else LayoutConfig()
    build_layout(layout_cfg)

    if args.kind == "drag":
        params = SimulationParams.load_yaml(args.sim_config) if args.sim_config else SimulationParams()
        per_cell = FULL_DRAGS_PER_CELL if args.full_scale else args.drags_per_cell
        textures = args.textures.split(",") if args.textures else list(TEXTURE_IDS)
        velocities = _float_list(args.velocities) if args.velocities else list(VELOCITY_GRID_MM_S)
        jobs = [(str(out_dir), layout_cfg, params, t, v, s)
                for t, v, s in drag_grid(textures, velocities, per_cell, args.seed)]
        worker = _simulate_drag_job
        grid = f"{len(textures)} textures x {len(velocities)} velocities x {per_cell} drags"
    else:
        params = TapParams.load_yaml(args.sim_config) if args.sim_config else TapParams()
        jobs = [(str(out_dir), layout_cfg, params, v, d, episode_seed(args.seed, vi, di, j), args.mic)
                for vi, v in enumerate(TAP_VELOCITIES_MM_S)
                for di, d in enumerate(TAP_DISTANCES_MM)
                for j in range(args.taps_per_cell)]
        worker = _simulate_tap_job
        grid = f"{len(TAP_VELOCITIES_MM_S)} velocities x {len(TAP_DISTANCES_MM)} distances x {args.taps_per_cell} taps"

    _banner(f"Simulating {args.kind} episodes: {grid}")
    start = time.time()
    if args.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.workers) as pool:
            records = list(pool.map(worker, jobs, chunksize=16))
    else:
        records = [worker(job) for job in jobs]

    save_manifest(DatasetManifest(records=records), out_dir / MANIFEST_FILE)
    print(f"  Episodes: {len(records)}")
    print(f"  Manifest: {out_dir / MANIFEST_FILE}")
    print(f"  Time: {time.time() - start:.1f}s")
    return 0


# ============================================================================
# PREPROCESS
# ============================================================================

def _window_sizes(task: str, window: Optional[int], history: Optional[float]) -> List[int]:
    if window is not None:
        return [window]
    if history is not None:
        return [history_to_window(history)]
    if task == "velocity":
        return sorted(HISTORY_WINDOWS.values())
    size = TASK_DEFAULTS[task]["window_size"]
    if size is None:
        raise ConfigError(f"task '{task}' has no window dataset")
    return [size]


def cmd_preprocess(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    pipeline = PipelineConfig.load_yaml(args.pipeline_config) if args.pipeline_config else PipelineConfig()
    out_dir = Path(args.out) if args.out else manifest_path.parent
    drags = [r for r in manifest.records if r.kind == "drag"]
    if not drags:
        logger.warning("manifest %s has no drag episodes; writing empty dataset(s)", manifest_path)

    _banner(f"Preprocessing {len(drags)} drag episodes for task '{args.task}'")
    for n in _window_sizes(args.task, args.window, args.history):
        episodes = iter_episodes(manifest, manifest_path.parent, kind="drag")
        dataset = build_dataset(episodes, n, pipeline)
        path = out_dir / f"windows_{args.task}_{n}.npz"
        save_dataset(path, dataset)
        print(f"  window {n:>3} steps: {len(dataset)} windows from {len(set(dataset.drag_id.tolist()))} drags -> {path}")
    return 0


# ============================================================================
# TRAIN / EVAL
# ============================================================================

def _load_run_config(args) -> RunConfig:
    base = RunConfig.load_yaml(args.run_config) if getattr(args, "run_config", None) else RunConfig()
    overrides = {"task": args.task or base.task}
    if args.window is not None:
        overrides["window_size"] = args.window
    if args.history is not None:
        overrides["history_s"] = args.history
    if args.seed is not None:
        overrides.update(data_seed=args.seed, model_seed=args.seed, split_seed=args.seed)
    if args.held_out:
        overrides["held_out_velocities"] = tuple(_float_list(args.held_out))
    if args.cv_rounds is not None:
        overrides["cv_rounds"] = args.cv_rounds
    if args.epochs is not None:
        overrides["hyper"] = {**base.hyper, "max_epochs": args.epochs}
    return dataclasses.replace(base, **overrides).resolved()


def _datasets_by_history(run: RunConfig, paths: Sequence[str]) -> Dict[Optional[float], WindowDataset]:
    """Map history seconds (None for non-velocity tasks) to loaded datasets."""
    if not paths:
        raise ConfigError("at least one --dataset is required")
    datasets = [load_dataset(p) for p in paths]
    if run.task != "velocity":
        ds = datasets[0]
        if ds.window_size != run.window_size:
            raise DataError(f"dataset window {ds.window_size} does not match task window {run.window_size}")
        return {None: ds}
    by_window = {ds.window_size: ds for ds in datasets}
    out = {}
    for history, steps in sorted(HISTORY_WINDOWS.items()):
        if steps in by_window and (run.history_s is None or abs(run.history_s - history) < 1e-9):
            out[history] = by_window[steps]
    if not out:
        raise DataError(f"no dataset matches the velocity history windows {sorted(HISTORY_WINDOWS.values())}")
    return out


def _model_config(run: RunConfig) -> ModelConfig:
    return ModelConfig.from_dict({**run.model, "task": run.task, "seed": run.model_seed})


def _fold_tag(history: Optional[float], k: int) -> str:
    return f"fold{k}" if history is None else f"h{history:g}_fold{k}"


def _assemble_report(run: RunConfig, fold_reports: Dict[Optional[float], List[Dict]],
                     baseline: Optional[List[np.ndarray]] = None) -> Dict:
    """Task report dict: per-fold entries plus the task summary."""
    if run.task == "texture":
        folds = fold_reports[None]
        return {"task": "texture", "folds": folds, "summary": harness.texture_summary(folds),
                "reference": harness.REFERENCE_CONTEXT["texture"]}
    if run.task == "localize":
        folds = fold_reports[None]
        summary = harness.localization_summary(folds)
        per_velocity = {f"{f['held_out_velocity']:g}": {"mean_error_mm": f["mean_error_mm"],
                                                        "median_error_mm": f["median_error_mm"]} for f in folds}
        return {"task": "localize", "folds": [{k: v for k, v in f.items() if k not in ("errors", "snr_errors")}
                                              for f in folds],
                "per_velocity": per_velocity, "summary": summary,
                "reference": harness.REFERENCE_CONTEXT["localize"]}

    bins, summary = {}, {}
    for history, folds in fold_reports.items():
        pred = np.concatenate([f["pred"] for f in folds])
        true = np.concatenate([f["true"] for f in folds])
        nominal = np.concatenate([f["nominal"] for f in folds])
        bins[history] = harness.velocity_metrics(pred, true, nominal)
        median = float(np.median(np.abs(pred - true)))
        summary[f"{history:g}"] = {"mean_error_mm_s": float(np.mean(np.abs(pred - true))),
                                   "median_error_mm_s": median,
                                   "median_error_pct_of_range": harness.range_percentage(median)}
    report = {
        "task": "velocity",
        "table": harness.velocity_table(bins).to_dict(orient="index"),
        "bins": {f"{h:g}": frame.to_dict(orient="records") for h, frame in bins.items()},
        "summary": summary,
        "reference": harness.REFERENCE_CONTEXT["velocity"],
    }
    if baseline:
        errors = np.concatenate(baseline)
        report["position_baseline"] = {"median_error_mm_s": float(np.median(errors)),
                                       "mean_error_mm_s": float(np.mean(errors))}
    return report


def _run_folds(run: RunConfig, run_dir: Path, datasets, plan, layout, fit: bool,
               position_dataset: Optional[WindowDataset] = None) -> Dict:
    hyper = run.train_hyper()
    model_config = _model_config(run)
    fold_reports: Dict[Optional[float], List[Dict]] = {}
    baseline = []
    for history, dataset in datasets.items():
        fold_reports[history] = []
        for k, fold in enumerate(plan.folds):
            tag = _fold_tag(history, k)
            ckpt = run_dir / f"model_{tag}.mtck"
            if fit:
                print(f"\n  Training {tag} ({len(fold.train)} train / {len(fold.val)} val / {len(fold.test)} test drags)")
                result = harness.train(model_config, fold, dataset, hyper)
                save_checkpoint(ckpt, result.model, {"fold": k, "history_s": history, "best_epoch": result.best_epoch})
                write_csv(result.curves, run_dir / f"curves_{tag}.csv")
                model = result.model
            else:
                model, _ = load_checkpoint(ckpt)
            report = harness.fold_report(run.task, model, dataset.select_drags(fold.test), layout, fold, history)
            fold_reports[history].append(report)
            if run.task == "velocity" and position_dataset is not None and dataset.window_size == 200:
                pos_config = dataclasses.replace(model_config, task="localize")
                pos_ckpt = run_dir / f"position_model_fold{k}.mtck"
                if fit:
                    pos_model = harness.train(pos_config, fold, position_dataset, hyper).model
                    save_checkpoint(pos_ckpt, pos_model, {"fold": k})
                else:
                    pos_model, _ = load_checkpoint(pos_ckpt)
                baseline.append(harness.position_baseline_errors(pos_model, dataset.select_drags(fold.test)))
    return _assemble_report(run, fold_reports, baseline)


def _print_summary(report: Dict) -> None:
    _banner(f"SUMMARY - {report['task']}")
    if report["task"] == "texture":
        for fold in report["folds"]:
            print(f"  held out {fold['held_out_velocity']:g} mm/s: accuracy {fold['accuracy'] * 100:.1f}%")
        s = report["summary"]
        print(f"  Mean accuracy: {s['mean_accuracy'] * 100:.1f}%")
        if s["mean_accuracy_excluding_slowest"] is not None:
            print(f"  Excluding {s['slowest_velocity']:g} mm/s: {s['mean_accuracy_excluding_slowest'] * 100:.1f}%")
    elif report["task"] == "localize":
        s = report["summary"]
        print(f"  Learned mean/median error: {s['mean_error_mm']:.2f} / {s['median_error_mm']:.2f} mm")
        print(f"  SNR baseline mean/median:  {s['snr_mean_error_mm']:.2f} / {s['snr_median_error_mm']:.2f} mm")
    else:
        for history, s in report["summary"].items():
            print(f"  {history} s history: median error {s['median_error_mm_s']:.2f} mm/s "
                  f"({s['median_error_pct_of_range']:.1f}% of range)")
        if "position_baseline" in report:
            print(f"  Position-derivative baseline median: {report['position_baseline']['median_error_mm_s']:.2f} mm/s")


def _prepare_run(args, run_dir: Path):
    run = _load_run_config(args)
    if run.task == "detect":
        raise ConfigError("use the detect subcommand for task 'detect'")
    datasets = _datasets_by_history(run, args.dataset)
    layout_cfg = LayoutConfig.load_yaml(args.layout_config) if args.layout_config else LayoutConfig()
    return run, datasets, layout_cfg


def _run_layout_config(args, run_dir: Path) -> LayoutConfig:
    """--layout-config if given, else the layout stored with the run, else the default."""
    if args.layout_config:
        return LayoutConfig.load_yaml(args.layout_config)
    if (run_dir / LAYOUT_FILE).is_file():
        return LayoutConfig.load_yaml(run_dir / LAYOUT_FILE)
    return LayoutConfig()


def cmd_train(args) -> int:
    torch.use_deterministic_algorithms(True)
    run_dir = Path(args.run_dir) if args.run_dir else default_output_root() / f"{args.task}-seed{args.seed or 42}"
    run, datasets, layout_cfg = _prepare_run(args, run_dir)
    layout = build_layout(layout_cfg)
    run = dataclasses.replace(run, dataset_path=",".join(args.dataset), output_dir=str(run_dir),
                              position_dataset_path=args.position_dataset or "")
    run_dir.mkdir(parents=True, exist_ok=True)
    run.dump_yaml(run_dir / RUN_CONFIG_FILE)
    layout_cfg.dump_yaml(run_dir / LAYOUT_FILE)

    torch.manual_seed(run.model_seed)
    reference = next(iter(datasets.values()))
    plan = harness.make_plan(reference, run.task, run.split_strategy, run.split_seed,
                             run.train_hyper().val_fraction, run.held_out_velocities, run.cv_rounds)
    write_json(run_dir / PLAN_FILE, plan.to_dict())

    _banner(f"Training task '{run.task}': {len(plan.folds)} folds, strategy {run.split_strategy}")
    position = load_dataset(args.position_dataset) if args.position_dataset else None
    report = _run_folds(run, run_dir, datasets, plan, layout, fit=True, position_dataset=position)
    write_json(run_dir / REPORT_FILE, report)
    render_run(run_dir)
    _print_summary(report)
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / RUN_CONFIG_FILE).is_file():
        raise DataError(f"{run_dir} is not a run directory (missing {RUN_CONFIG_FILE})")
    run = RunConfig.load_yaml(run_dir / RUN_CONFIG_FILE).resolved()
    paths = args.dataset or run.dataset_path.split(",")
    datasets = _datasets_by_history(run, paths)
    layout = build_layout(_run_layout_config(args, run_dir))
    try:
        plan = harness.SplitPlan.from_dict(json.loads((run_dir / PLAN_FILE).read_text(encoding="utf-8")))
    except OSError as exc:
        raise DataError(f"missing split plan in {run_dir}: {exc}") from exc
    position_path = args.position_dataset or run.position_dataset_path
    position = load_dataset(position_path) if position_path else None
    report = _run_folds(run, run_dir, datasets, plan, layout, fit=False, position_dataset=position)
    write_json(run_dir / REPORT_FILE, report)
    render_run(run_dir)
    _print_summary(report)
    return 0


# ============================================================================
# DETECT / REPORT
# ============================================================================

def _read_stream(lines):
    for line in lines:
        line = line.strip()
        if not line:
            continue
        try:
            yield float(line)
        except ValueError as exc:
            raise DataError(f"non-numeric sample '{line}' on stdin") from exc


def cmd_detect(args) -> int:
    if args.stream:
        detector = MicContactDetector(args.threshold, args.history, args.sample_rate, channel=args.mic)
        samples = _read_stream(sys.stdin)
        offset = 0
        while True:
            event = next(stream_detect(samples, detector), None)
            if event is None:
                return 0
            index = offset + event.time_index
            print(f"contact at sample {index} ({index / args.sample_rate:.4f} s)", flush=True)
            # re-arm on the rest of the stream
            offset = index + 1
            detector.reset()

    if not args.manifest:
        raise ConfigError("detect needs --manifest or --stream")
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    episodes = []
    for ep in iter_episodes(manifest, manifest_path.parent, kind="tap"):
        distance = ep.metadata.get("grid_distance_mm", round(float(ep.metadata["distance_mm"]), 3))
        episodes.append((ep.nominal_velocity_mm_s, float(distance), ep))
    if not episodes:
        raise DataError(f"no tap episodes found in {manifest_path}")

    distances = sorted({d for _, d, _ in episodes})
    velocities = sorted({v for v, _, _ in episodes})
    result = analyze_taps(episodes, distances, velocities, args.mic, args.threshold, args.history, args.flatline)

    run_dir = Path(args.run_dir) if args.run_dir else default_output_root() / "detect"
    run_dir.mkdir(parents=True, exist_ok=True)
    RunConfig(task="detect", output_dir=str(run_dir), dataset_path=str(manifest_path)).dump_yaml(run_dir / RUN_CONFIG_FILE)
    write_json(run_dir / REPORT_FILE, {"task": "detect", **result.to_dict()})
    write_csv(result.response_times, run_dir / "response_times.csv")
    render_run(run_dir)

    _banner("Relative response time, mean (std) ms")
    print(result.table.to_string())
    print(f"\n  Removed (F/T flat-line): {len(result.removed)}")
    print(f"  Flagged for review:      {len(result.review)}")
    return 0


def cmd_report(args) -> int:
    written = render_run(args.run_dir)
    print(f"Rendered {len(written)} files in {args.run_dir}")
    return 0


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tactile_cli", description="Mic-array tactile sensing toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate episodes and a manifest")
    p.add_argument("--kind", choices=["drag", "tap"], default="drag")
    p.add_argument("--out", help="output directory (default: $MIC_TACTILE_OUTPUT/episodes)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--drags-per-cell", type=int, default=DESK_DRAGS_PER_CELL)
    p.add_argument("--full-scale", action="store_true", help=f"{FULL_DRAGS_PER_CELL} drags per cell")
    p.add_argument("--textures", help="comma-separated texture ids (default: a,b,c,d)")
    p.add_argument("--velocities", help="comma-separated mm/s (default: 20..60 step 5)")
    p.add_argument("--taps-per-cell", type=int, default=45)
    p.add_argument("--mic", type=int, default=0, help="microphone of interest for taps")
    p.add_argument("--sim-config", help="YAML simulation parameters")
    p.add_argument("--layout-config", help="YAML layout parameters")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", help="build a window dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=["texture", "localize", "velocity"], required=True)
    p.add_argument("--window", type=int, help="override the task window size")
    p.add_argument("--history", type=float, help="velocity history in seconds (0.05, 0.10, 0.25)")
    p.add_argument("--pipeline-config", help="YAML pipeline parameters")
    p.add_argument("--out", help="output directory (default: next to the manifest)")
    p.set_defaults(func=cmd_preprocess)

    for name, func in (("train", cmd_train), ("eval", cmd_eval)):
        p = sub.add_parser(name, help=f"{name} models over split folds")
        p.add_argument("--dataset", action="append", default=[], help="window dataset (.npz); repeat for velocity histories")
        p.add_argument("--run-dir", required=(name == "eval"))
        p.add_argument("--layout-config")
        p.add_argument("--position-dataset", help="100-step localization dataset for the position-derivative baseline")
        if name == "train":
            p.add_argument("--task", choices=["texture", "localize", "velocity"], required=True)
            p.add_argument("--run-config", help="YAML RunConfig")
            p.add_argument("--window", type=int)
            p.add_argument("--history", type=float)
            p.add_argument("--seed", type=int)
            p.add_argument("--held-out", help="comma-separated held-out velocities")
            p.add_argument("--cv-rounds", type=int)
            p.add_argument("--epochs", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("detect", help="contact detection and response-time table")
    p.add_argument("--manifest", help="manifest with tap episodes")
    p.add_argument("--stream", action="store_true", help="read counts from stdin, one per line")
    p.add_argument("--run-dir")
    p.add_argument("--mic", type=int, default=0)
    p.add_argument("--threshold", type=float, default=18.0)
    p.add_argument("--history", type=int, default=20)
    p.add_argument("--flatline", type=int, default=12, help="identical F/T samples that mark a flat-line")
    p.add_argument("--sample-rate", type=float, default=2300.0)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="re-render CSV/SVG from report.json")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except TactileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
