"""
Experiment protocol: split construction, training loop, metrics, baselines.

- Held-out-velocity folds (texture, localization): one fold per held-out
  velocity, test = every drag at that velocity
- Velocity cross-validation: disjoint test sets stratified over velocities
- AdamW training with best-validation-loss checkpoint selection
- Texture confusion matrices, localization and velocity errors
- SNR localization baseline and position-derivative velocity baseline

Splits are built over drag ids, never over windows, so overlapping windows of
one drag cannot leak between train and test.
"""
import copy
import dataclasses
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader, TensorDataset

from config import HELD_OUT_VELOCITIES_MM_S, VELOCITY_GRID_MM_S, TrainHyper
from errors import DataError, SplitLeakageError, TrainingDivergedError
from neural_model import ModelConfig, TactileEncoder, build_model, loss
from sensor_sim import TEXTURE_IDS, SensorLayout
from signal_pipeline import WindowDataset


logger = logging.getLogger(__name__)

VELOCITY_BIN_MM_S = 5.0
N_TEXTURES = len(TEXTURE_IDS)

# real-data figures, carried in reports as context only
REFERENCE_CONTEXT = {
    "texture": {"mean_accuracy": 0.773},
    "localize": {"mean_error_mm": 1.8, "median_error_mm": 1.5,
                 "snr_mean_error_mm": 5.5, "snr_median_error_mm": 5.3},
    "velocity": {"median_error_mm_s": {"0.05": 5.1, "0.1": 4.5, "0.25": 5.3},
                 "position_baseline_median_error_mm_s": 9.7},
}


# ============================================================================
# SPLITS
# ============================================================================

@dataclasses.dataclass(frozen=True)
class SplitFold:
    train: Tuple[str, ...]
    val: Tuple[str, ...]
    test: Tuple[str, ...]
    held_out_velocity: Optional[float] = None


@dataclasses.dataclass(frozen=True)
class SplitPlan:
    task: str
    strategy: str
    folds: Tuple[SplitFold, ...]

    def to_dict(self) -> Dict:
        return {
            "task": self.task,
            "strategy": self.strategy,
            "folds": [{"train": list(f.train), "val": list(f.val), "test": list(f.test),
                       "held_out_velocity": f.held_out_velocity} for f in self.folds],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SplitPlan":
        try:
            folds = tuple(SplitFold(train=tuple(f["train"]), val=tuple(f["val"]), test=tuple(f["test"]),
                                    held_out_velocity=f.get("held_out_velocity"))
                          for f in data["folds"])
            plan = cls(task=data["task"], strategy=data["strategy"], folds=folds)
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed split plan: {exc}") from exc
        validate_plan(plan)
        return plan


def _train_val(drags: Sequence[str], val_fraction: float, rng: np.random.Generator) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
    drags = list(drags)
    rng.shuffle(drags)
    n_val = int(round(val_fraction * len(drags)))
    if len(drags) >= 2:
        n_val = min(max(n_val, 1), len(drags) - 1)
    else:
        n_val = 0
    return tuple(sorted(drags[n_val:])), tuple(sorted(drags[:n_val]))


def _drags_by_velocity(dataset: WindowDataset) -> Dict[float, List[str]]:
    groups: Dict[float, List[str]] = {}
    for drag, vel in sorted(dataset.drag_velocities().items()):
        groups.setdefault(float(vel), []).append(drag)
    return groups


def make_held_out_velocity_splits(dataset: WindowDataset,
                                  velocities: Sequence[float] = HELD_OUT_VELOCITIES_MM_S,
                                  val_fraction: float = 0.1,
                                  seed: int = 42,
                                  task: str = "texture") -> SplitPlan:
    """
    One fold per held-out velocity.

    Test holds every drag at that velocity; the remaining drags (odd grid
    velocities included) are split train/val by drag with a seeded shuffle.

    Raises:
        DataError: a held-out velocity has no drags in the dataset
    """
    groups = _drags_by_velocity(dataset)
    folds = []
    for k, v in enumerate(velocities):
        test = [d for vel, ds in groups.items() if math.isclose(vel, v) for d in ds]
        if not test:
            raise DataError(f"no drags at held-out velocity {v:g} mm/s")
        rest = [d for vel, ds in groups.items() if not math.isclose(vel, v) for d in ds]
        train, val = _train_val(rest, val_fraction, np.random.default_rng([seed, k]))
        folds.append(SplitFold(train=train, val=val, test=tuple(sorted(test)), held_out_velocity=float(v)))
    plan = SplitPlan(task=task, strategy="held_out_velocity", folds=tuple(folds))
    validate_plan(plan, dataset)
    return plan


def make_velocity_cv_splits(dataset: WindowDataset,
                            rounds: int = 10,
                            val_fraction: float = 0.1,
                            seed: int = 42,
                            task: str = "velocity") -> SplitPlan:
    """
    `rounds` folds with pairwise-disjoint test sets covering every drag.

    Drags are shuffled per velocity and dealt round-robin, so each test set
    holds at least one drag of every velocity.

    Raises:
        DataError: some velocity has fewer than `rounds` drags
    """
    groups = _drags_by_velocity(dataset)
    if not groups:
        raise DataError("dataset has no drags")
    rng = np.random.default_rng(seed)
    buckets: List[List[str]] = [[] for _ in range(rounds)]
    for vel, drags in groups.items():
        if len(drags) < rounds:
            raise DataError(f"{len(drags)} drags at {vel:g} mm/s; {rounds}-round cross-validation needs {rounds}")
        drags = list(drags)
        rng.shuffle(drags)
        for i, drag in enumerate(drags):
            buckets[i % rounds].append(drag)

    folds = []
    for r in range(rounds):
        test = set(buckets[r])
        rest = [d for ds in groups.values() for d in ds if d not in test]
        train, val = _train_val(rest, val_fraction, np.random.default_rng([seed, r]))
        folds.append(SplitFold(train=train, val=val, test=tuple(sorted(test))))
    plan = SplitPlan(task=task, strategy="velocity_cv", folds=tuple(folds))
    validate_plan(plan, dataset)
    return plan


def validate_plan(plan: SplitPlan, dataset: Optional[WindowDataset] = None) -> None:
    """Raise SplitLeakageError on any drag crossing train/val/test or an impure held-out fold."""
    velocities = dataset.drag_velocities() if dataset is not None else {}
    for k, fold in enumerate(plan.folds):
        train, val, test = set(fold.train), set(fold.val), set(fold.test)
        crossing = (train & val) | (train & test) | (val & test)
        if crossing:
            raise SplitLeakageError(f"fold {k}: drag(s) {sorted(crossing)[:3]} appear in more than one split")
        if fold.held_out_velocity is None or not velocities:
            continue
        v = fold.held_out_velocity
        unknown = [d for d in train | val | test if d not in velocities]
        if unknown:
            raise DataError(f"fold {k}: drag {unknown[0]} not in the dataset")
        impure = [d for d in test if not math.isclose(velocities[d], v)]
        if impure:
            raise SplitLeakageError(f"fold {k}: test drag {impure[0]} is not at {v:g} mm/s")
        leaked = [d for d in train | val if math.isclose(velocities[d], v)]
        if leaked:
            raise SplitLeakageError(f"fold {k}: held-out velocity {v:g} mm/s leaks into train/val via {leaked[0]}")


def make_plan(dataset: WindowDataset, task: str, strategy: str, seed: int,
              val_fraction: float = 0.1,
              held_out_velocities: Sequence[float] = HELD_OUT_VELOCITIES_MM_S,
              rounds: int = 10) -> SplitPlan:
    if strategy == "held_out_velocity":
        return make_held_out_velocity_splits(dataset, held_out_velocities, val_fraction, seed, task)
    if strategy == "velocity_cv":
        return make_velocity_cv_splits(dataset, rounds, val_fraction, seed, task)
    raise DataError(f"unknown split strategy '{strategy}'")


# ============================================================================
# TRAINING
# ============================================================================

@dataclasses.dataclass(eq=False)
class TrainResult:
    model: TactileEncoder
    curves: pd.DataFrame
    best_epoch: int
    best_val_loss: float


def task_targets(dataset: WindowDataset, task: str) -> np.ndarray:
    if task == "texture":
        return dataset.label_texture
    if task == "localize":
        return dataset.label_pos_mm
    if task == "velocity":
        return dataset.label_vel_mm_s
    raise DataError(f"task '{task}' has no learned targets")


def _tensors(dataset: WindowDataset, task: str, dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(dataset.data, dtype=dtype)
    y = task_targets(dataset, task)
    y = torch.as_tensor(y, dtype=torch.long) if task == "texture" else torch.as_tensor(y, dtype=dtype)
    return x, y


def _mean_loss(model: TactileEncoder, x: torch.Tensor, y: torch.Tensor, task: str, batch_size: int) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            xb, yb = x[i:i + batch_size], y[i:i + batch_size]
            total += float(loss(model(xb, task=task), yb, task)) * xb.shape[0]
    return total / x.shape[0]


def train(model_config: ModelConfig,
          fold: SplitFold,
          dataset: WindowDataset,
          hyper: TrainHyper = TrainHyper(max_epochs=20)) -> TrainResult:
    """
    Fit a fresh model on a fold's train drags; keep the best-validation epoch.

    Args:
        model_config: encoder config; its task selects the head and targets
        fold: drag ids for train / val
        dataset: window dataset the ids refer to
        hyper: optimizer and loop settings (max_epochs must be set)

    Returns:
        TrainResult with the best-validation model and per-epoch curves

    Raises:
        DataError: empty training split
        TrainingDivergedError: a batch loss became NaN/Inf
    """
    task = model_config.task
    if hyper.max_epochs is None or hyper.max_epochs < 1:
        raise DataError("max_epochs must be a positive integer")
    train_set = dataset.select_drags(fold.train)
    val_set = dataset.select_drags(fold.val)
    if len(train_set) == 0:
        raise DataError("fold has no training windows")

    config = dataclasses.replace(model_config, window_size=dataset.window_size)
    model = build_model(config, hyper.dtype)
    dtype = getattr(torch, hyper.dtype)

    scale = float(np.std(train_set.data))
    targets = task_targets(train_set, task)
    if task == "texture":
        model.set_standardization(1.0 / scale if scale > 0 else 1.0)
    else:
        mean = np.atleast_1d(targets.mean(axis=0))
        std = np.atleast_1d(targets.std(axis=0))
        model.set_standardization(1.0 / scale if scale > 0 else 1.0, mean, np.where(std > 0, std, 1.0))

    x_train, y_train = _tensors(train_set, task, dtype)
    loader = DataLoader(
        TensorDataset(x_train, y_train),
        batch_size=hyper.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(config.seed),
    )
    if len(val_set) == 0:
        logger.warning("fold has no validation windows; selecting on training loss")
        x_val, y_val = x_train, y_train
    else:
        x_val, y_val = _tensors(val_set, task, dtype)

    optimizer = torch.optim.AdamW(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    rows = []
    best_state, best_epoch, best_val = None, 0, math.inf
    for epoch in range(1, hyper.max_epochs + 1):
        model.train()
        running, seen = 0.0, 0
        for step, (xb, yb) in enumerate(loader):
            value = loss(model(xb, task=task), yb, task)
            if not torch.isfinite(value):
                raise TrainingDivergedError("non-finite training loss", epoch=epoch, step=step)
            optimizer.zero_grad()
            value.backward()
            optimizer.step()
            running += value.item() * xb.shape[0]
            seen += xb.shape[0]

        val_loss = _mean_loss(model, x_val, y_val, task, hyper.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError("non-finite validation loss", epoch=epoch, step=len(loader))
        rows.append({"epoch": epoch, "train_loss": running / seen, "val_loss": val_loss})
        logger.info("epoch %d/%d train %.5f val %.5f", epoch, hyper.max_epochs, running / seen, val_loss)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model=model, curves=pd.DataFrame(rows), best_epoch=best_epoch, best_val_loss=best_val)


def predict(model: TactileEncoder, dataset: WindowDataset, task: Optional[str] = None, batch_size: int = 256) -> np.ndarray:
    """Model outputs for every window: class ids (texture) or regression values."""
    task = task or model.config.task
    dtype = next(model.parameters()).dtype
    model.eval()
    outputs = []
    with torch.no_grad():
        for i in range(0, len(dataset), batch_size):
            out = model(torch.as_tensor(dataset.data[i:i + batch_size], dtype=dtype), task=task)
            outputs.append(out.argmax(dim=-1) if task == "texture" else out)
    if not outputs:
        return np.zeros(0)
    return torch.cat(outputs).double().numpy() if task != "texture" else torch.cat(outputs).numpy()


# ============================================================================
# METRICS
# ============================================================================

def texture_metrics(y_true: np.ndarray, y_pred: np.ndarray) -> Dict:
    """
    Confusion matrix (rows = true class), accuracy and error adjacency.

    adjacency_share is the fraction of errors predicting a texture one
    spacing step away; None when there are no errors.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise DataError("empty test set")
    confusion = np.zeros((N_TEXTURES, N_TEXTURES), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    errors = y_true != y_pred
    adjacency = float(np.mean(np.abs(y_true[errors] - y_pred[errors]) == 1)) if errors.any() else None
    return {
        "confusion": confusion,
        "accuracy": float(np.trace(confusion) / confusion.sum()),
        "adjacency_share": adjacency,
        "n_test": int(y_true.size),
    }


def eval_texture(model: TactileEncoder, test: WindowDataset) -> Dict:
    if len(test) == 0:
        raise DataError("empty test set")
    return texture_metrics(test.label_texture, predict(model, test, "texture"))


def localization_metrics(pred_mm: np.ndarray, true_mm: np.ndarray) -> Dict:
    """Euclidean errors with mean and median."""
    pred_mm = np.asarray(pred_mm, dtype=np.float64).reshape(-1, 2)
    true_mm = np.asarray(true_mm, dtype=np.float64).reshape(-1, 2)
    if true_mm.shape[0] == 0:
        raise DataError("empty test set")
    errors = np.hypot(*(pred_mm - true_mm).T)
    return {"errors": errors, "mean_error_mm": float(errors.mean()), "median_error_mm": float(np.median(errors)),
            "n_test": int(errors.size)}


def eval_localization(model: TactileEncoder, test: WindowDataset) -> Dict:
    if len(test) == 0:
        raise DataError("empty test set")
    return localization_metrics(predict(model, test, "localize"), test.label_pos_mm)


def velocity_bin(velocity_mm_s) -> np.ndarray:
    """Nearest 5 mm/s grid value (halves round up), clipped to the commanded range."""
    v = np.asarray(velocity_mm_s, dtype=np.float64)
    bins = np.floor(v / VELOCITY_BIN_MM_S + 0.5) * VELOCITY_BIN_MM_S
    return np.clip(bins, VELOCITY_GRID_MM_S[0], VELOCITY_GRID_MM_S[-1])


def velocity_metrics(pred_mm_s: np.ndarray, true_mm_s: np.ndarray, nominal_mm_s: np.ndarray) -> pd.DataFrame:
    """
    Absolute errors binned by the drag's nominal (commanded) velocity.

    Returns one row per non-empty bin (columns bin_mm_s, count, mean_error,
    median_error). Empty bins are absent, not zero.
    """
    pred = np.asarray(pred_mm_s, dtype=np.float64).reshape(-1)
    true = np.asarray(true_mm_s, dtype=np.float64).reshape(-1)
    nominal = np.asarray(nominal_mm_s, dtype=np.float64).reshape(-1)
    if true.size == 0:
        raise DataError("empty test set")
    if nominal.shape != true.shape:
        raise DataError(f"{nominal.size} nominal velocities for {true.size} predictions")
    frame = pd.DataFrame({"bin_mm_s": velocity_bin(nominal), "abs_error": np.abs(pred - true)})
    table = frame.groupby("bin_mm_s")["abs_error"].agg(count="count", mean_error="mean", median_error="median")
    return table.reset_index()


def eval_velocity(model: TactileEncoder, test: WindowDataset, history_s: float) -> Dict:
    if len(test) == 0:
        raise DataError("empty test set")
    pred = predict(model, test, "velocity")
    errors = np.abs(pred - test.label_vel_mm_s)
    return {
        "history_s": float(history_s),
        "bins": velocity_metrics(pred, test.label_vel_mm_s, test.nominal_velocity),
        "pred": pred,
        "true": test.label_vel_mm_s.copy(),
        "nominal": test.nominal_velocity.astype(np.float64),
        "errors": errors,
        "mean_error_mm_s": float(errors.mean()),
        "median_error_mm_s": float(np.median(errors)),
        "n_test": int(errors.size),
    }


# ============================================================================
# BASELINES
# ============================================================================

def snr_baseline_localize(window: np.ndarray, layout: SensorLayout, noise_floor: Optional[np.ndarray]) -> np.ndarray:
    """
    Position of the microphone with the highest window-RMS / noise-floor ratio.

    Ties go to the lowest channel index.

    Raises:
        DataError: no (or non-positive) noise-floor calibration
    """
    if noise_floor is None:
        raise DataError("SNR baseline needs a per-channel noise floor")
    noise_floor = np.asarray(noise_floor, dtype=np.float64)
    if noise_floor.shape != (layout.mic_positions.shape[0],) or np.any(noise_floor <= 0):
        raise DataError("noise floor must be positive for every channel")
    rms = np.sqrt(np.mean(np.asarray(window, dtype=np.float64) ** 2, axis=0))
    return layout.mic_positions[int(np.argmax(rms / noise_floor))].copy()


def snr_baseline_predictions(dataset: WindowDataset, layout: SensorLayout) -> np.ndarray:
    return np.array([snr_baseline_localize(w, layout, nf) for w, nf in zip(dataset.data, dataset.noise_floor)])


def velocity_from_position_baseline(position_model: TactileEncoder, window: np.ndarray,
                                    sample_rate_hz: float = 2000.0) -> float:
    """
    Speed from two position estimates: ||pos(last 100 steps) - pos(first 100 steps)|| / 0.10 s.

    Raises:
        DataError: window is not 200 steps
    """
    return float(velocity_from_position_batch(position_model, np.asarray(window)[None], sample_rate_hz)[0])


def velocity_from_position_batch(position_model: TactileEncoder, windows: np.ndarray,
                                 sample_rate_hz: float = 2000.0, batch_size: int = 256) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[1] != 200:
        raise DataError(f"position-derivative baseline needs 200-step windows, got {windows.shape[1:2]}")
    dtype = next(position_model.parameters()).dtype
    halves = []
    for part in (windows[:, :100], windows[:, 100:]):
        part = part - part.mean(axis=1, keepdims=True)
        outs = []
        position_model.eval()
        with torch.no_grad():
            for i in range(0, part.shape[0], batch_size):
                outs.append(position_model(torch.as_tensor(part[i:i + batch_size], dtype=dtype), task="localize"))
        halves.append(torch.cat(outs).double().numpy())
    elapsed_s = windows.shape[1] / sample_rate_hz
    return np.linalg.norm(halves[1] - halves[0], axis=1) / elapsed_s


# ============================================================================
# REPORT ASSEMBLY
# ============================================================================

def texture_summary(fold_reports: Sequence[Dict]) -> Dict:
    """Mean accuracy over folds, and over folds excluding the slowest held-out velocity."""
    acc = {r["held_out_velocity"]: r["accuracy"] for r in fold_reports}
    slowest = min(acc) if acc else None
    rest = [a for v, a in acc.items() if v != slowest]
    return {
        "mean_accuracy": float(np.mean(list(acc.values()))) if acc else None,
        "mean_accuracy_excluding_slowest": float(np.mean(rest)) if rest else None,
        "slowest_velocity": slowest,
        "reference": REFERENCE_CONTEXT["texture"],
    }


def localization_summary(fold_reports: Sequence[Dict]) -> Dict:
    """Per-fold means averaged, pooled median, SNR baseline alongside."""
    pooled = np.concatenate([r["errors"] for r in fold_reports]) if fold_reports else np.zeros(0)
    return {
        "mean_error_mm": float(np.mean([r["mean_error_mm"] for r in fold_reports])),
        "median_error_mm": float(np.mean([r["median_error_mm"] for r in fold_reports])),
        "pooled_median_error_mm": float(np.median(pooled)) if pooled.size else None,
        "snr_mean_error_mm": float(np.mean([r["snr_mean_error_mm"] for r in fold_reports])),
        "snr_median_error_mm": float(np.mean([r["snr_median_error_mm"] for r in fold_reports])),
        "reference": REFERENCE_CONTEXT["localize"],
    }


def velocity_table(bins_by_history: Dict[float, pd.DataFrame]) -> pd.DataFrame:
    """
    History rows x velocity-bin columns of "mean / median" error strings.

    Takes one velocity_metrics frame per history (pooled over folds). Bins
    without samples are left as "-".
    """
    columns = [f"{v:g}" for v in VELOCITY_GRID_MM_S]
    rows = {}
    for history, frame in sorted(bins_by_history.items()):
        row = {c: "-" for c in columns}
        for rec in frame.itertuples(index=False):
            row[f"{rec.bin_mm_s:g}"] = f"{rec.mean_error:.1f} / {rec.median_error:.1f}"
        rows[f"{history:g} s"] = row
    return pd.DataFrame.from_dict(rows, orient="index", columns=columns)


def range_percentage(error_mm_s: float) -> float:
    """Error as a percentage of the commanded 20-60 mm/s range."""
    return 100.0 * error_mm_s / (VELOCITY_GRID_MM_S[-1] - VELOCITY_GRID_MM_S[0])


def fold_report(task: str, model: TactileEncoder, test: WindowDataset, layout: SensorLayout,
                fold: SplitFold, history_s: Optional[float] = None) -> Dict:
    """Metrics for one trained fold, tagged with its held-out velocity and window size."""
    meta = {"held_out_velocity": fold.held_out_velocity, "window_size": test.window_size,
            "history_s": history_s}
    if task == "texture":
        return {**meta, **eval_texture(model, test)}
    if task == "localize":
        learned = eval_localization(model, test)
        snr = localization_metrics(snr_baseline_predictions(test, layout), test.label_pos_mm)
        return {**meta, **learned, "snr_mean_error_mm": snr["mean_error_mm"],
                "snr_median_error_mm": snr["median_error_mm"], "snr_errors": snr["errors"]}
    if task == "velocity":
        return {**meta, **eval_velocity(model, test, history_s if history_s is not None else test.window_size / test.sample_rate_hz)}
    raise DataError(f"task '{task}' has no fold report")


def position_baseline_errors(position_model: TactileEncoder, test: WindowDataset) -> np.ndarray:
    """Absolute errors of the position-derivative speed estimate on 200-step test windows."""
    if len(test) == 0:
        raise DataError("empty test set")
    estimate = velocity_from_position_batch(position_model, test.data, test.sample_rate_hz)
    return np.abs(estimate - test.label_vel_mm_s)
