"""
Configuration layer for the mic-array tactile toolkit.

Frozen dataclasses for every tunable part of a run, loadable from plain dicts
or YAML files. Defaults reproduce the desk-scale setup:
- 24 x 24 mm sensing area, 10 microphones, 2 mm receptive decay
- 2000 Hz drag episodes, 2300 Hz tap episodes
- task windows 500 / 100 / 200 steps with a 50-step offset
- AdamW at 1e-4, batch 64, seed 42
"""
import dataclasses
import os
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

import yaml

from errors import ConfigError


T = TypeVar("T")

OUTPUT_ROOT_ENV = "MIC_TACTILE_OUTPUT"
DEFAULT_OUTPUT_ROOT = "runs"

# task -> window steps, max epochs, split strategy
TASK_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "texture": {"window_size": 500, "max_epochs": 20, "split_strategy": "held_out_velocity"},
    "localize": {"window_size": 100, "max_epochs": 60, "split_strategy": "held_out_velocity"},
    "velocity": {"window_size": 200, "max_epochs": 30, "split_strategy": "velocity_cv"},
    "detect": {"window_size": None, "max_epochs": None, "split_strategy": None},
}

# history seconds -> velocity window steps at 2000 Hz
HISTORY_WINDOWS: Dict[float, int] = {0.05: 100, 0.10: 200, 0.25: 500}

VELOCITY_GRID_MM_S: Tuple[float, ...] = (20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0)
HELD_OUT_VELOCITIES_MM_S: Tuple[float, ...] = (20.0, 30.0, 40.0, 50.0, 60.0)


# ============================================================================
# DICT / YAML PLUMBING
# ============================================================================

def _from_dict(cls: Type[T], data: Optional[Dict[str, Any]]) -> T:
    """Build a config dataclass from a dict, rejecting unknown keys."""
    data = dict(data or {})
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown key(s) {', '.join(unknown)}")

    kwargs = {}
    for name, value in data.items():
        field = known[name]
        default = field.default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def _to_dict(obj: Any) -> Dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = _to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


class _ConfigMixin:
    """dict / YAML round-trip shared by all config dataclasses."""

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]):
        return _from_dict(cls, data)

    def to_dict(self) -> Dict[str, Any]:
        return _to_dict(self)

    @classmethod
    def load_yaml(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)

    def dump_yaml(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)


# ============================================================================
# SIMULATION
# ============================================================================

@dataclasses.dataclass(frozen=True)
class LayoutConfig(_ConfigMixin):
    """Microphone geometry in mm."""

    inner_side_mm: float = 8.0
    outer_offset_mm: float = 9.0
    area_size_mm: float = 24.0
    receptive_decay_mm: float = 2.0


@dataclasses.dataclass(frozen=True)
class SimulationParams(_ConfigMixin):
    """Drag-episode generator parameters. Gains are in ADC counts."""

    sample_rate_hz: float = 2000.0
    pre_drag_s: float = 0.15
    post_drag_s: float = 0.10
    accel_range_mm_s2: Tuple[float, float] = (300.0, 400.0)
    force_range_n: Tuple[float, float] = (1.0, 5.0)
    rotation_range_deg: Tuple[float, float] = (0.0, 45.0)
    min_path_mm: float = 15.0
    harmonic_weights: Tuple[float, ...] = (1.0, 0.5, 0.25)
    harmonic_jitter: float = 0.1
    bump_gain_counts: float = 340.0
    friction_gain_counts: float = 28.0
    flat_friction_scale: float = 1.5
    sensor_noise_counts: float = 2.0
    mic_bias_counts: float = 40.0
    reference_force_n: float = 3.0
    reference_speed_mm_s: float = 40.0
    friction_coefficient: float = 0.3
    contact_stiffness_n_mm: float = 12.0
    ft_noise_n: float = 0.01


@dataclasses.dataclass(frozen=True)
class TapParams(_ConfigMixin):
    """Tap-episode generator parameters (response-time experiment)."""

    sample_rate_hz: float = 2300.0
    pre_contact_range_s: Tuple[float, float] = (0.15, 0.25)
    hold_s: float = 0.3
    approach_accel_mm_s2: float = 4000.0
    contact_stiffness_n_mm: float = 12.0
    plateau_range_n: Tuple[float, float] = (2.0, 3.0)
    ft_noise_n: float = 0.01
    ft_drift_n: float = 0.3
    ft_flatline_probability: float = 0.0
    ft_flatline_samples: int = 20
    base_latency_ms: float = 0.5
    latency_per_mm_ms: float = 0.4
    velocity_latency_ms: float = 3.0
    velocity_latency_scale_mm_s: float = 40.0
    latency_jitter_ms: float = 0.2
    rise_depth_mm: float = 0.02
    tap_gain_counts_per_mm_s: float = 20.0
    amplitude_jitter: float = 0.1
    ring_decay_ms: float = 15.0
    sensor_noise_counts: float = 2.0
    mic_bias_counts: float = 40.0


# ============================================================================
# PIPELINE AND TRAINING
# ============================================================================

@dataclasses.dataclass(frozen=True)
class PipelineConfig(_ConfigMixin):
    """Preprocessing settings for turning drag episodes into windows."""

    sample_rate_hz: float = 2000.0
    baseline_samples: int = 200
    vel_threshold_mm_s: float = 5.0
    window_offset: int = 50
    min_segment_length: int = 500
    highpass_cutoff_hz: float = 3.0
    highpass_order: int = 3


@dataclasses.dataclass(frozen=True)
class TrainHyper(_ConfigMixin):
    """Optimizer and loop settings."""

    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 64
    max_epochs: Optional[int] = None
    val_fraction: float = 0.1
    dtype: str = "float32"


@dataclasses.dataclass(frozen=True)
class RunConfig(_ConfigMixin):
    """Everything needed to reproduce a train/eval/detect run."""

    task: str = "texture"
    window_size: Optional[int] = None
    history_s: Optional[float] = None
    split_strategy: Optional[str] = None
    held_out_velocities: Tuple[float, ...] = HELD_OUT_VELOCITIES_MM_S
    cv_rounds: int = 10
    model: Dict[str, Any] = dataclasses.field(default_factory=dict)
    hyper: Dict[str, Any] = dataclasses.field(default_factory=dict)
    data_seed: Optional[int] = 42
    model_seed: Optional[int] = 42
    split_seed: Optional[int] = 42
    dataset_path: str = ""
    position_dataset_path: str = ""
    output_dir: str = ""

    def resolved(self) -> "RunConfig":
        """Fill task defaults and check invariants."""
        if self.task not in TASK_DEFAULTS:
            raise ConfigError(f"unknown task '{self.task}' (expected one of {sorted(TASK_DEFAULTS)})")
        strategy = self.split_strategy or TASK_DEFAULTS[self.task]["split_strategy"]
        if self.task != "detect" and strategy not in ("held_out_velocity", "velocity_cv"):
            raise ConfigError(f"unknown split strategy '{strategy}'")
        for name in ("data_seed", "model_seed", "split_seed"):
            if getattr(self, name) is None:
                raise ConfigError(f"{name} must be set explicitly")

        window = self.window_size
        if window is None and self.task == "velocity" and self.history_s is not None:
            window = history_to_window(self.history_s)
        if window is None:
            window = TASK_DEFAULTS[self.task]["window_size"]

        hyper = dict(self.hyper)
        if hyper.get("max_epochs") is None:
            hyper["max_epochs"] = TASK_DEFAULTS[self.task]["max_epochs"]
        return dataclasses.replace(self, window_size=window, hyper=hyper, split_strategy=strategy)

    def train_hyper(self) -> TrainHyper:
        return TrainHyper.from_dict(self.hyper)


def history_to_window(history_s: float) -> int:
    """Map a history length in seconds to its window size in steps."""
    for hist, steps in HISTORY_WINDOWS.items():
        if abs(hist - history_s) < 1e-9:
            return steps
    raise ConfigError(f"unsupported history {history_s} s (expected one of {sorted(HISTORY_WINDOWS)})")


def default_output_root() -> Path:
    """Output root from the environment, falling back to ./runs."""
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))
