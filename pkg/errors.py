"""
Exception hierarchy for the mic-array tactile toolkit.

Each error carries the process exit code the CLI returns for it:
0 success, 1 usage/config, 2 data, 3 numeric failure.
"""
from typing import Optional


class TactileError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 1


class ConfigError(TactileError, ValueError):
    """Bad or inconsistent configuration."""

    exit_code = 1


class DataError(TactileError, ValueError):
    """Invalid input data: layouts, episodes, manifests, datasets."""

    exit_code = 2


class SplitLeakageError(DataError):
    """A drag id crosses train/val/test, or a held-out fold is impure."""


class NumericalError(TactileError, ArithmeticError):
    """Non-finite values in a forward or backward pass."""

    exit_code = 3

    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(message if layer is None else f"{message} (layer: {layer})")
        self.layer = layer


class TrainingDivergedError(NumericalError):
    """Training loss became NaN or Inf."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f"{message} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


class OnsetInBaselineWarning(UserWarning):
    """The baseline span overlaps robot motion or contact; the baseline is biased."""
