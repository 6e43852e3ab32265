"""
Episode-to-window preprocessing.

Steps, per episode:
1. subtract each microphone's baseline (mean of the first B samples)
2. keep contiguous runs where the robot moves faster than the threshold
3. slice runs into fixed-length windows at a uniform offset
4. zero-phase high-pass each window, remove any residual DC
5. label with texture, last-step position and median planar speed
"""
import dataclasses
import logging
import warnings
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sps

from config import PipelineConfig
from errors import DataError, OnsetInBaselineWarning
from sensor_sim import N_MICS, TEXTURE_IDS, DragEpisode


logger = logging.getLogger(__name__)


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclasses.dataclass(eq=False)
class CenteredEpisode:
    """Episode with per-channel baselines removed (real-valued counts)."""

    episode: DragEpisode
    signals: np.ndarray
    baseline: np.ndarray
    noise_floor: np.ndarray


@dataclasses.dataclass(frozen=True)
class Segment:
    """A contiguous moving run [start, stop) of one episode."""

    drag_id: str
    episode_id: str
    start: int
    stop: int

    @property
    def length(self) -> int:
        return self.stop - self.start


@dataclasses.dataclass(frozen=True)
class WindowLabels:
    texture: int
    pos_mm: Tuple[float, float]
    vel_mm_s: float


@dataclasses.dataclass(eq=False)
class WindowSample:
    """One filtered, labeled window ready for the model."""

    data: np.ndarray
    sample_rate_hz: float
    label_texture: int
    label_pos_mm: np.ndarray
    label_vel_mm_s: float
    drag_id: str
    episode_id: str
    nominal_velocity: float
    noise_floor: np.ndarray
    window_start: int


@dataclasses.dataclass(eq=False)
class WindowDataset:
    """Columnar set of windows; row i of every array belongs to window i."""

    data: np.ndarray
    label_texture: np.ndarray
    label_pos_mm: np.ndarray
    label_vel_mm_s: np.ndarray
    nominal_velocity: np.ndarray
    drag_id: np.ndarray
    episode_id: np.ndarray
    noise_floor: np.ndarray
    window_start: np.ndarray
    window_size: int
    sample_rate_hz: float = 2000.0

    def __len__(self) -> int:
        return int(self.data.shape[0])

    @classmethod
    def empty(cls, window_size: int, sample_rate_hz: float = 2000.0) -> "WindowDataset":
        return cls(
            data=np.zeros((0, window_size, N_MICS)),
            label_texture=np.zeros(0, dtype=np.int64),
            label_pos_mm=np.zeros((0, 2)),
            label_vel_mm_s=np.zeros(0),
            nominal_velocity=np.zeros(0),
            drag_id=np.array([], dtype=str),
            episode_id=np.array([], dtype=str),
            noise_floor=np.zeros((0, N_MICS)),
            window_start=np.zeros(0, dtype=np.int64),
            window_size=window_size,
            sample_rate_hz=sample_rate_hz,
        )

    @classmethod
    def from_samples(cls, samples: Sequence[WindowSample], window_size: int,
                     sample_rate_hz: float = 2000.0) -> "WindowDataset":
        if not samples:
            return cls.empty(window_size, sample_rate_hz)
        return cls(
            data=np.stack([s.data for s in samples]),
            label_texture=np.array([s.label_texture for s in samples], dtype=np.int64),
            label_pos_mm=np.stack([s.label_pos_mm for s in samples]),
            label_vel_mm_s=np.array([s.label_vel_mm_s for s in samples]),
            nominal_velocity=np.array([s.nominal_velocity for s in samples]),
            drag_id=np.array([s.drag_id for s in samples]),
            episode_id=np.array([s.episode_id for s in samples]),
            noise_floor=np.stack([s.noise_floor for s in samples]),
            window_start=np.array([s.window_start for s in samples], dtype=np.int64),
            window_size=window_size,
            sample_rate_hz=sample_rate_hz,
        )

    def subset(self, mask: np.ndarray) -> "WindowDataset":
        """Rows selected by a boolean mask or index array."""
        return WindowDataset(
            data=self.data[mask],
            label_texture=self.label_texture[mask],
            label_pos_mm=self.label_pos_mm[mask],
            label_vel_mm_s=self.label_vel_mm_s[mask],
            nominal_velocity=self.nominal_velocity[mask],
            drag_id=self.drag_id[mask],
            episode_id=self.episode_id[mask],
            noise_floor=self.noise_floor[mask],
            window_start=self.window_start[mask],
            window_size=self.window_size,
            sample_rate_hz=self.sample_rate_hz,
        )

    def select_drags(self, drag_ids) -> "WindowDataset":
        return self.subset(np.isin(self.drag_id, np.asarray(list(drag_ids), dtype=self.drag_id.dtype)))

    def drag_velocities(self) -> Dict[str, float]:
        """drag_id -> nominal velocity (one entry per drag)."""
        out: Dict[str, float] = {}
        for drag, vel in zip(self.drag_id.tolist(), self.nominal_velocity.tolist()):
            out.setdefault(drag, float(vel))
        return out


# ============================================================================
# OPERATIONS
# ============================================================================

def subtract_baseline(episode: DragEpisode, config: PipelineConfig = PipelineConfig()) -> CenteredEpisode:
    """
    Remove each microphone's baseline: the mean of the first B samples.

    Emits OnsetInBaselineWarning (and a log warning) when the robot is already
    moving, or the recorded contact begins, inside the baseline span.

    Raises:
        DataError: episode shorter than B samples
    """
    b = int(config.baseline_samples)
    if episode.n_samples < b or b < 1:
        raise DataError(f"{episode.episode_id}: {episode.n_samples} samples, baseline needs {b}")

    counts = episode.mic_counts.astype(np.float64)
    baseline = counts[:b].mean(axis=0)
    centered = counts - baseline[None, :]
    noise_floor = np.sqrt(np.mean((centered[:b] - centered[:b].mean(axis=0)) ** 2, axis=0))

    onset = _onset_in_baseline(episode, b, config.vel_threshold_mm_s)
    if onset is not None:
        msg = f"{episode.episode_id}: {onset} at sample < {b}; baseline is biased"
        logger.warning(msg)
        warnings.warn(msg, OnsetInBaselineWarning, stacklevel=2)

    return CenteredEpisode(episode=episode, signals=centered, baseline=baseline, noise_floor=noise_floor)


def _onset_in_baseline(episode: DragEpisode, b: int, threshold: float) -> Optional[str]:
    moving = np.flatnonzero(episode.planar_speed[:b] >= threshold)
    if moving.size:
        return f"robot motion starts at {int(moving[0])}"
    contact = episode.metadata.get("contact_index")
    if contact is not None and int(contact) < b:
        return f"contact at {int(contact)}"
    return None


def segment_drags(episode: DragEpisode,
                  vel_threshold: float = 5.0,
                  min_length: int = 500) -> List[Segment]:
    """
    Maximal contiguous runs where planar speed >= vel_threshold.

    Runs shorter than min_length (the largest window size) are dropped. Each
    kept run gets a drag_id "<episode_id>/seg<k>".
    """
    moving = episode.planar_speed >= vel_threshold
    if not moving.any():
        return []
    edges = np.diff(np.concatenate([[0], moving.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)

    segments = []
    for start, stop in zip(starts, stops):
        if stop - start < min_length:
            continue
        k = len(segments)
        segments.append(Segment(f"{episode.episode_id}/seg{k}", episode.episode_id, int(start), int(stop)))
    return segments


def window_spans(length: int, n: int, offset: int) -> List[Tuple[int, int]]:
    """[start, stop) spans of floor((L - n) / offset) + 1 windows; none if L < n."""
    if n < 1 or offset < 1:
        raise DataError(f"window size and offset must be >= 1 (got {n}, {offset})")
    if length < n:
        return []
    return [(s, s + n) for s in range(0, length - n + 1, offset)]


def window_slice(segment: np.ndarray, n: int, offset: int) -> List[np.ndarray]:
    """Cut a (L, channels) array into windows starting at 0, offset, 2*offset, ..."""
    segment = np.asarray(segment)
    return [segment[a:b] for a, b in window_spans(segment.shape[0], n, offset)]


def highpass(window: np.ndarray,
             sample_rate_hz: float = 2000.0,
             cutoff_hz: float = 3.0,
             order: int = 3) -> np.ndarray:
    """
    Zero-phase Butterworth high-pass along time (axis 0).

    Forward-backward second-order sections with odd-reflection padding of
    3 * (order + 1) samples, so the net magnitude is |H(f)|^2 and the phase is
    zero.

    Raises:
        DataError: window not longer than the padding
    """
    window = np.asarray(window, dtype=np.float64)
    padlen = 3 * (order + 1)
    if window.shape[0] <= padlen:
        raise DataError(f"window of {window.shape[0]} samples too short for padding {padlen}")
    sos = sps.butter(order, cutoff_hz, btype="highpass", fs=sample_rate_hz, output="sos")
    return sps.sosfiltfilt(sos, window, axis=0, padtype="odd", padlen=padlen)


def label_window(start: int, stop: int,
                 robot_pos_mm: np.ndarray,
                 robot_vel_mm_s: np.ndarray,
                 texture: Optional[str]) -> WindowLabels:
    """
    Labels for the span [start, stop): last-step (x, y), median planar speed, texture.

    Raises:
        DataError: span outside the robot stream or missing (non-finite) samples
    """
    if start < 0 or stop > robot_pos_mm.shape[0] or stop > robot_vel_mm_s.shape[0] or stop <= start:
        raise DataError(f"robot stream does not cover window [{start}, {stop})")
    pos = robot_pos_mm[stop - 1, :2]
    vel = robot_vel_mm_s[start:stop, :2]
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
        raise DataError(f"missing robot samples in window [{start}, {stop})")
    speed = float(np.median(np.hypot(vel[:, 0], vel[:, 1])))
    texture_class = TEXTURE_IDS.index(texture) if texture is not None else -1
    return WindowLabels(texture=texture_class, pos_mm=(float(pos[0]), float(pos[1])), vel_mm_s=speed)


def condition_window(raw: np.ndarray, config: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """High-pass a raw window and remove the residual per-channel mean."""
    filtered = highpass(raw, config.sample_rate_hz, config.highpass_cutoff_hz, config.highpass_order)
    return filtered - filtered.mean(axis=0, keepdims=True)


def episode_windows(episode: DragEpisode,
                    window_size: int,
                    config: PipelineConfig = PipelineConfig()) -> List[WindowSample]:
    """Run the full pipeline over one drag episode."""
    if abs(episode.sample_rate_hz - config.sample_rate_hz) > 1e-9:
        raise DataError(f"{episode.episode_id}: sample rate {episode.sample_rate_hz} Hz, "
                        f"pipeline expects {config.sample_rate_hz} Hz")
    centered = subtract_baseline(episode, config)
    samples = []
    for seg in segment_drags(episode, config.vel_threshold_mm_s, config.min_segment_length):
        for a, b in window_spans(seg.length, window_size, config.window_offset):
            start, stop = seg.start + a, seg.start + b
            labels = label_window(start, stop, episode.robot_pos_mm, episode.robot_vel_mm_s, episode.texture)
            samples.append(WindowSample(
                data=condition_window(centered.signals[start:stop], config),
                sample_rate_hz=episode.sample_rate_hz,
                label_texture=labels.texture,
                label_pos_mm=np.array(labels.pos_mm),
                label_vel_mm_s=labels.vel_mm_s,
                drag_id=seg.drag_id,
                episode_id=episode.episode_id,
                nominal_velocity=episode.nominal_velocity_mm_s,
                noise_floor=centered.noise_floor.copy(),
                window_start=start,
            ))
    return samples


def build_dataset(episodes, window_size: int, config: PipelineConfig = PipelineConfig()) -> WindowDataset:
    """Windows from every drag episode, in episode order."""
    samples: List[WindowSample] = []
    n_episodes = 0
    for episode in episodes:
        if episode.kind != "drag":
            continue
        n_episodes += 1
        samples.extend(episode_windows(episode, window_size, config))
    logger.info("extracted %d windows of %d steps from %d drag episodes", len(samples), window_size, n_episodes)
    return WindowDataset.from_samples(samples, window_size, config.sample_rate_hz)


def dominant_frequency(x: np.ndarray, sample_rate_hz: float, band: Tuple[float, float] = (5.0, 200.0)) -> Tuple[float, float]:
    """Strongest periodogram peak within band; returns (frequency, bin width)."""
    freqs, power = sps.periodogram(np.asarray(x, dtype=np.float64), fs=sample_rate_hz, detrend="constant")
    in_band = (freqs >= band[0]) & (freqs <= band[1])
    if not in_band.any():
        raise DataError(f"no periodogram bins inside {band} Hz")
    peak = np.argmax(np.where(in_band, power, -np.inf))
    return float(freqs[peak]), float(freqs[1] - freqs[0])
