"""
Report emission: JSON (canonical), CSV tables and SVG figures.

report.json in a run directory is the source of truth; render_run() rebuilds
every CSV and SVG from it and from the curves_*.csv files, so the `report`
subcommand can re-render without retraining.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from errors import DataError
from sensor_sim import TEXTURE_IDS
from storage import atomic_write_bytes


logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy / pandas values into plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, pd.DataFrame):
        return to_jsonable(obj.to_dict(orient="records"))
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path, payload: Dict) -> None:
    text = json.dumps(to_jsonable(payload), sort_keys=True, indent=2) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def read_json(path) -> Dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed report {path}: {exc}") from exc


def write_csv(frame: pd.DataFrame, path, index: bool = False) -> None:
    atomic_write_bytes(path, frame.to_csv(index=index, lineterminator="\n").encode("utf-8"))


# ============================================================================
# FIGURES
# ============================================================================

def confusion_figure(confusion, title: str) -> go.Figure:
    matrix = np.asarray(confusion)
    labels = list(TEXTURE_IDS)
    fig = go.Figure(go.Heatmap(
        z=matrix,
        x=labels,
        y=labels,
        colorscale="Blues",
        text=matrix,
        texttemplate="%{text}",
        showscale=False,
    ))
    fig.update_layout(title=title, xaxis_title="predicted", yaxis_title="true",
                      yaxis_autorange="reversed", width=420, height=420)
    return fig


def curves_figure(curves: pd.DataFrame, title: str) -> go.Figure:
    fig = go.Figure()
    for column in ("train_loss", "val_loss"):
        fig.add_trace(go.Scatter(x=curves["epoch"], y=curves[column], mode="lines+markers", name=column))
    fig.update_layout(title=title, xaxis_title="epoch", yaxis_title="loss", width=560, height=380)
    return fig


def render_svg(fig: go.Figure, path) -> bool:
    """Static SVG export through kaleido; logs and returns False when unavailable."""
    try:
        atomic_write_bytes(path, fig.to_image(format="svg"))
        return True
    except DataError:
        raise
    except Exception as exc:
        logger.warning("SVG export unavailable for %s: %s", path, exc)
        return False


# ============================================================================
# RUN RENDERING
# ============================================================================

def _texture_tables(report: Dict, run_dir: Path) -> List[Path]:
    written = []
    rows = []
    for fold in report["folds"]:
        v = fold["held_out_velocity"]
        name = f"confusion_{v:g}mm_s"
        frame = pd.DataFrame(fold["confusion"], index=list(TEXTURE_IDS), columns=list(TEXTURE_IDS))
        write_csv(frame, run_dir / f"{name}.csv", index=True)
        written.append(run_dir / f"{name}.csv")
        if render_svg(confusion_figure(fold["confusion"], f"held out {v:g} mm/s"), run_dir / f"{name}.svg"):
            written.append(run_dir / f"{name}.svg")
        rows.append({"held_out_velocity": v, "accuracy": fold["accuracy"],
                     "adjacency_share": fold["adjacency_share"], "n_test": fold["n_test"]})
    write_csv(pd.DataFrame(rows), run_dir / "texture_folds.csv")
    written.append(run_dir / "texture_folds.csv")
    return written


def _localization_tables(report: Dict, run_dir: Path) -> List[Path]:
    frame = pd.DataFrame([
        {key: fold[key] for key in ("held_out_velocity", "mean_error_mm", "median_error_mm",
                                    "snr_mean_error_mm", "snr_median_error_mm", "n_test")}
        for fold in report["folds"]
    ])
    write_csv(frame, run_dir / "localization_folds.csv")
    return [run_dir / "localization_folds.csv"]


def _velocity_tables(report: Dict, run_dir: Path) -> List[Path]:
    table = pd.DataFrame.from_dict(report["table"], orient="index")
    write_csv(table, run_dir / "velocity_table.csv", index=True)
    bins = pd.DataFrame([dict(row, history_s=h) for h, rows in sorted(report["bins"].items()) for row in rows])
    write_csv(bins, run_dir / "velocity_bins.csv")
    return [run_dir / "velocity_table.csv", run_dir / "velocity_bins.csv"]


def _detect_tables(report: Dict, run_dir: Path) -> List[Path]:
    table = pd.DataFrame.from_dict(report["table"], orient="index")
    write_csv(table, run_dir / "response_time_table.csv", index=True)
    write_csv(pd.DataFrame(report["cells"]), run_dir / "response_time_cells.csv")
    return [run_dir / "response_time_table.csv", run_dir / "response_time_cells.csv"]


_RENDERERS = {
    "texture": _texture_tables,
    "localize": _localization_tables,
    "velocity": _velocity_tables,
    "detect": _detect_tables,
}


def render_run(run_dir) -> List[Path]:
    """Rebuild CSV tables and SVG figures of a run directory from its report.json."""
    run_dir = Path(run_dir)
    report = read_json(run_dir / REPORT_FILE)
    task = report.get("task")
    if task not in _RENDERERS:
        raise DataError(f"{run_dir / REPORT_FILE}: unknown task '{task}'")
    written = _RENDERERS[task](report, run_dir)
    for curves_path in sorted(run_dir.glob("curves_*.csv")):
        svg_path = curves_path.with_suffix(".svg")
        if render_svg(curves_figure(pd.read_csv(curves_path), curves_path.stem), svg_path):
            written.append(svg_path)
    logger.info("rendered %d report files in %s", len(written), run_dir)
    return written
