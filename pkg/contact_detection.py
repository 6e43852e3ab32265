"""
Contact onset detection and relative response time.

- Realtime microphone detector: fires when a sample is >= 18 counts above the
  median of the previous 20 samples (streaming and batch forms agree)
- Offline F/T heuristic over a 30-sample look-ahead window
- Episode conditioning: tare F/T drift, drop flat-lined F/T episodes
- Response-time study over a distance x velocity tap grid
"""
import collections
import dataclasses
import logging
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from config import TapParams
from errors import DataError
from sensor_sim import DragEpisode, SensorLayout, episode_seed, simulate_tap, tap_location


logger = logging.getLogger(__name__)

FZ_CHANNEL = 2
MIN_CELL_EPISODES = 30
REPORTING_RATE = 0.5

# real-data table, report context only; None marks the missing cell
REFERENCE_TABLE_MS = {
    10.0: {0.0: (3.0, 3.1), 2.0: (4.2, 2.5), 4.0: (5.1, 1.4), 6.0: None},
    55.0: {0.0: (4.8, 2.5), 2.0: (3.1, 1.4), 4.0: (3.0, 1.3), 6.0: (4.0, 1.6)},
    100.0: {0.0: (3.0, 1.3), 2.0: (2.6, 1.7), 4.0: (3.1, 1.6), 6.0: (3.8, 2.3)},
}


@dataclasses.dataclass(frozen=True)
class ContactEvent:
    episode_id: str
    time_index: int
    time_s: float
    source: str
    method: str
    channel: Optional[int] = None


# ============================================================================
# MICROPHONE DETECTOR
# ============================================================================

class MicContactDetector:
    """
    Causal onset detector for one microphone channel.

    Keeps the last `history` samples in a ring buffer; feed() returns an event
    for the first sample at least `threshold` counts above their median, and
    None afterwards.
    """

    def __init__(self, threshold: float = 18.0, history: int = 20, sample_rate_hz: float = 2300.0,
                 channel: int = 0, episode_id: str = ""):
        if history < 1:
            raise DataError("detector history must be >= 1 sample")
        self.threshold = threshold
        self.history = history
        self.sample_rate_hz = sample_rate_hz
        self.channel = channel
        self.episode_id = episode_id
        self.reset()

    def reset(self) -> None:
        self._buffer = collections.deque(maxlen=self.history)
        self._index = 0
        self.event: Optional[ContactEvent] = None

    def feed(self, sample: float) -> Optional[ContactEvent]:
        index = self._index
        self._index += 1
        if self.event is not None:
            return None
        fire = len(self._buffer) == self.history and sample - np.median(self._buffer) >= self.threshold
        self._buffer.append(float(sample))
        if not fire:
            return None
        self.event = ContactEvent(self.episode_id, index, index / self.sample_rate_hz,
                                  source="mic", method="realtime_mic", channel=self.channel)
        return self.event


def mic_contact_detect(counts: np.ndarray,
                       threshold: float = 18.0,
                       history: int = 20,
                       sample_rate_hz: float = 2300.0,
                       channel: int = 0,
                       episode_id: str = "") -> Optional[ContactEvent]:
    """First i with counts[i] - median(counts[i-history:i]) >= threshold, else None."""
    x = np.asarray(counts, dtype=np.float64).reshape(-1)
    if x.size <= history:
        return None
    medians = np.median(sliding_window_view(x[:-1], history), axis=1)
    hits = np.flatnonzero(x[history:] - medians >= threshold)
    if hits.size == 0:
        return None
    index = int(hits[0] + history)
    return ContactEvent(episode_id, index, index / sample_rate_hz, source="mic", method="realtime_mic", channel=channel)


def stream_detect(samples: Iterable[float], detector: MicContactDetector) -> Iterator[ContactEvent]:
    """Feed samples in arrival order; yield the event when it fires."""
    for sample in samples:
        event = detector.feed(sample)
        if event is not None:
            yield event


# ============================================================================
# OFFLINE F/T LABEL
# ============================================================================

def ft_contact_detect_offline(fz: np.ndarray,
                              sample_rate_hz: float = 2300.0,
                              episode_id: str = "",
                              window: int = 30,
                              onset_level_n: float = -1.0,
                              start_within: int = 4,
                              start_drop_n: float = 0.15,
                              late_offset: int = 25,
                              late_drop_n: float = 0.5) -> Optional[ContactEvent]:
    """
    Earliest index i whose look-ahead window F[i:i+window] satisfies:

    1. some point is below onset_level_n
    2. every later point is below F[i]
    3. F[i + start_within] <= F[i] - start_drop_n
    4. F[i + late_offset] <= F[i] - late_drop_n

    Non-causal by construction. Returns None when no index qualifies.
    """
    f = np.asarray(fz, dtype=np.float64).reshape(-1)
    if window <= max(start_within, late_offset):
        raise DataError(f"offline window {window} must exceed offsets {start_within} and {late_offset}")
    if f.size < window:
        return None
    w = sliding_window_view(f, window)
    head = w[:, 0]
    ok = (
        (w.min(axis=1) < onset_level_n)
        & (w[:, 1:].max(axis=1) < head)
        & (w[:, start_within] <= head - start_drop_n)
        & (w[:, late_offset] <= head - late_drop_n)
    )
    hits = np.flatnonzero(ok)
    if hits.size == 0:
        return None
    index = int(hits[0])
    return ContactEvent(episode_id, index, index / sample_rate_hz, source="ft", method="offline_ft")


def ft_threshold_crossing(fz: np.ndarray, level_n: float = -1.0) -> Optional[int]:
    """First index where the (tared) z-force drops below level_n."""
    below = np.flatnonzero(np.asarray(fz) < level_n)
    return int(below[0]) if below.size else None


def ground_truth_event(episode: DragEpisode) -> Optional[ContactEvent]:
    index = episode.metadata.get("contact_index")
    if index is None:
        return None
    return ContactEvent(episode.episode_id, int(index), int(index) / episode.sample_rate_hz,
                        source="ft", method="ground_truth_sim")


# ============================================================================
# EPISODE CONDITIONING
# ============================================================================

def bias_episode(episode: DragEpisode, quiet_span: Tuple[int, int] = (0, 200)) -> DragEpisode:
    """
    Tare all six F/T channels by their means over quiet_span [start, stop).

    Raises:
        DataError: empty or out-of-range span, or a span not ending before contact
    """
    start, stop = int(quiet_span[0]), int(quiet_span[1])
    if not 0 <= start < stop <= episode.n_samples:
        raise DataError(f"{episode.episode_id}: quiet span [{start}, {stop}) outside the episode")

    contact = episode.metadata.get("contact_index")
    if contact is None:
        fz = episode.ft_n[:, FZ_CHANNEL]
        event = ft_contact_detect_offline(fz - fz[start], episode.sample_rate_hz, episode.episode_id)
        contact = event.time_index if event is not None else None
    if contact is not None and int(contact) < stop:
        raise DataError(f"{episode.episode_id}: quiet span [{start}, {stop}) overlaps contact at {contact}")

    tared = episode.ft_n - episode.ft_n[start:stop].mean(axis=0, keepdims=True)
    return dataclasses.replace(episode, ft_n=tared)


def _longest_repeat(rows: np.ndarray) -> int:
    """Longest run of identical consecutive rows (1 for any non-empty input)."""
    if rows.shape[0] == 0:
        return 0
    same = np.all(rows[1:] == rows[:-1], axis=1).astype(np.int8)
    if not same.any():
        return 1
    edges = np.diff(np.concatenate([[0], same, [0]]))
    lengths = np.flatnonzero(edges == -1) - np.flatnonzero(edges == 1)
    return int(lengths.max()) + 1


def contact_region_start(episode: DragEpisode, margin: int = 5, level_n: float = -0.5) -> Optional[int]:
    contact = episode.metadata.get("contact_index")
    if contact is None:
        fz = episode.ft_n[:, FZ_CHANNEL]
        contact = ft_threshold_crossing(fz - fz[0], level_n)
    if contact is None:
        return None
    return max(int(contact) - margin, 0)


def remove_flatline(episodes: Sequence[DragEpisode], k: int = 12, margin: int = 5) -> Tuple[List[DragEpisode], List[str]]:
    """
    Drop episodes with >= k identical consecutive F/T samples in the contact region.

    Returns (kept episodes, removed episode ids).
    """
    kept, removed = [], []
    for ep in episodes:
        start = contact_region_start(ep, margin)
        if start is not None and _longest_repeat(ep.ft_n[start:]) >= k:
            logger.warning("%s: F/T flat-line of >= %d samples during contact; removed", ep.episode_id, k)
            removed.append(ep.episode_id)
        else:
            kept.append(ep)
    return kept, removed


def relative_response_time(mic_event: ContactEvent, ft_event: ContactEvent) -> float:
    """Microphone detection time minus F/T onset time, in milliseconds."""
    if mic_event.episode_id != ft_event.episode_id:
        raise DataError(f"events from different episodes: {mic_event.episode_id} vs {ft_event.episode_id}")
    return (mic_event.time_s - ft_event.time_s) * 1000.0


# ============================================================================
# RESPONSE-TIME STUDY
# ============================================================================

@dataclasses.dataclass(eq=False)
class StudyResult:
    cells: pd.DataFrame
    table: pd.DataFrame
    response_times: pd.DataFrame
    review: List[str]
    removed: List[str]

    def to_dict(self) -> Dict:
        return {
            "cells": self.cells.to_dict(orient="records"),
            "table": self.table.to_dict(orient="index"),
            "review": list(self.review),
            "removed": list(self.removed),
            "reference_ms": {f"{v:g}": {f"{d:g}": cell for d, cell in row.items()}
                             for v, row in REFERENCE_TABLE_MS.items()},
        }


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.1f} ({std:.1f})"


def measure_episode(episode: DragEpisode,
                    mic_of_interest: int = 0,
                    threshold: float = 18.0,
                    history: int = 20,
                    quiet_samples: int = 200) -> Tuple[Optional[ContactEvent], Optional[ContactEvent]]:
    """Tare, then run both detectors on one tap; returns (mic event, F/T event)."""
    tared = bias_episode(episode, (0, quiet_samples))
    ft_event = ft_contact_detect_offline(tared.ft_n[:, FZ_CHANNEL], tared.sample_rate_hz, tared.episode_id)
    mic_event = mic_contact_detect(tared.mic_counts[:, mic_of_interest], threshold, history,
                                   tared.sample_rate_hz, mic_of_interest, tared.episode_id)
    return mic_event, ft_event


def summarize_cells(records: pd.DataFrame, distances: Sequence[float], velocities: Sequence[float],
                    n_kept: Dict[Tuple[float, float], int]) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Per-cell statistics and the velocity x distance table of "mean (std)" strings."""
    rows = []
    for v in velocities:
        for d in distances:
            cell = records[(records["velocity_mm_s"] == v) & (records["distance_mm"] == d)]
            times = cell["response_ms"].dropna().to_numpy()
            kept = n_kept.get((v, d), 0)
            rate = times.size / kept if kept else 0.0
            mean = float(times.mean()) if times.size else None
            std = float(times.std(ddof=1)) if times.size > 1 else (0.0 if times.size else None)
            rows.append({
                "velocity_mm_s": v,
                "distance_mm": d,
                "n_episodes": kept,
                "n_detected": int(times.size),
                "detection_rate": rate,
                "mean_ms": mean,
                "std_ms": std,
                "cell": format_cell(mean, std) if times.size and rate >= REPORTING_RATE else "-",
            })
    cells = pd.DataFrame(rows)
    table = cells.pivot(index="velocity_mm_s", columns="distance_mm", values="cell")
    table.index = [f"{v:g} mm/s" for v in table.index]
    table.columns = [f"{d:g} mm" for d in table.columns]
    return cells, table


def response_time_study(layout: SensorLayout,
                        distances: Sequence[float] = (0.0, 2.0, 4.0, 6.0),
                        velocities: Sequence[float] = (10.0, 55.0, 100.0),
                        episodes_per_cell: int = 45,
                        base_seed: int = 42,
                        params: TapParams = TapParams(),
                        mic_of_interest: int = 0,
                        threshold: float = 18.0,
                        history: int = 20,
                        flatline_samples: int = 12) -> StudyResult:
    """
    Simulate taps over the grid and measure microphone-vs-F/T response times.

    Cells whose detection rate is below 50% render as "-". Cells left with
    fewer than 30 episodes after flat-line removal are logged. Taps where
    the offline F/T heuristic finds nothing go to the review list.
    """
    episodes = []
    for vi, v in enumerate(velocities):
        for di, d in enumerate(distances):
            for j in range(episodes_per_cell):
                seed = episode_seed(base_seed, vi, di, j)
                loc = tap_location(layout, mic_of_interest, d, np.random.default_rng(seed))
                episodes.append((v, d, simulate_tap(layout, loc, v, seed, params, mic_of_interest)))
    logger.info("simulated %d tap episodes", len(episodes))
    return analyze_taps(episodes, distances, velocities, mic_of_interest, threshold, history, flatline_samples)


def analyze_taps(episodes: Sequence[Tuple[float, float, DragEpisode]],
                 distances: Sequence[float],
                 velocities: Sequence[float],
                 mic_of_interest: int = 0,
                 threshold: float = 18.0,
                 history: int = 20,
                 flatline_samples: int = 12) -> StudyResult:
    """Detector comparison over already-simulated or loaded (velocity, distance, episode) triples."""
    kept, removed = remove_flatline([ep for _, _, ep in episodes], flatline_samples)
    kept_ids = {ep.episode_id for ep in kept}
    n_kept: Dict[Tuple[float, float], int] = collections.Counter()
    records, review = [], []
    for v, d, ep in episodes:
        if ep.episode_id not in kept_ids:
            continue
        n_kept[(v, d)] += 1
        mic_event, ft_event = measure_episode(ep, mic_of_interest, threshold, history)
        if ft_event is None:
            review.append(ep.episode_id)
            continue
        rt = relative_response_time(mic_event, ft_event) if mic_event is not None else None
        records.append({"episode_id": ep.episode_id, "velocity_mm_s": v, "distance_mm": d,
                        "ft_index": ft_event.time_index,
                        "mic_index": mic_event.time_index if mic_event is not None else None,
                        "response_ms": rt})

    for (v, d), n in sorted(n_kept.items()):
        if n < MIN_CELL_EPISODES:
            logger.warning("cell (%g mm/s, %g mm) has %d episodes after cleaning; fewer than %d",
                           v, d, n, MIN_CELL_EPISODES)
    if review:
        logger.warning("%d tap(s) without an F/T onset flagged for manual review", len(review))

    frame = pd.DataFrame(records, columns=["episode_id", "velocity_mm_s", "distance_mm",
                                           "ft_index", "mic_index", "response_ms"])
    frame["response_ms"] = pd.to_numeric(frame["response_ms"])
    cells, table = summarize_cells(frame, distances, velocities, n_kept)
    return StudyResult(cells=cells, table=table, response_times=frame, review=review, removed=removed)
