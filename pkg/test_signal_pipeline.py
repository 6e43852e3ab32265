"""Tests for baseline removal, segmentation, windowing, filtering and labels."""
import warnings

import numpy as np
import pytest

from config import LayoutConfig, PipelineConfig
from errors import DataError, OnsetInBaselineWarning
from sensor_sim import N_MICS, DragEpisode, build_layout, simulate_drag, simulate_tap
from signal_pipeline import (WindowDataset, build_dataset, condition_window, episode_windows, highpass,
                             label_window, segment_drags, subtract_baseline, window_slice, window_spans)


FS = 2000.0


def make_episode(speed: np.ndarray, counts=None, episode_id: str = "ep", **metadata) -> DragEpisode:
    """Straight drag along x with the given planar speed profile."""
    n = speed.size
    x = np.cumsum(speed) / FS
    pos = np.column_stack([x, np.full(n, 12.0), np.zeros(n)])
    vel = np.column_stack([speed, np.zeros(n), np.zeros(n)])
    if counts is None:
        counts = np.full((n, N_MICS), 1241, dtype=np.int32)
    return DragEpisode(episode_id, "b", 20.0, FS, counts, pos, vel, np.zeros((n, 6)), 0, metadata=metadata)


# ============================================================================
# FILTER
# ============================================================================

def _sine(freq, seconds=20.0):
    t = np.arange(int(seconds * FS)) / FS
    return np.sin(2.0 * np.pi * freq * t)


def test_highpass_removes_dc():
    x = np.full((4000, 2), 7.0)
    assert np.max(np.abs(highpass(x, FS))) <= 1e-6 * 7.0


def test_highpass_attenuates_1hz():
    y = highpass(_sine(1.0), FS)
    middle = y[y.size // 4: 3 * y.size // 4]
    assert np.max(np.abs(middle)) <= 0.002


def test_highpass_passes_100hz():
    y = highpass(_sine(100.0, 20.0), FS)
    middle = y[y.size // 4: 3 * y.size // 4]
    assert np.max(np.abs(middle)) == pytest.approx(1.0, rel=0.01)


def test_highpass_zero_phase():
    x = _sine(30.0, 2.0)
    y = highpass(x, FS)
    core = slice(500, x.size - 500)
    lags = range(-20, 21)
    corr = [np.dot(x[core], np.roll(y, lag)[core]) for lag in lags]
    assert list(lags)[int(np.argmax(corr))] == 0


def test_highpass_rejects_short_window():
    with pytest.raises(DataError):
        highpass(np.zeros((12, N_MICS)), FS)


def test_condition_window_is_zero_mean():
    rng = np.random.default_rng(1)
    w = condition_window(rng.normal(50.0, 5.0, (500, N_MICS)))
    assert np.allclose(w.mean(axis=0), 0.0, atol=1e-9)


# ============================================================================
# WINDOWS
# ============================================================================

def test_window_count_formula():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 600))
        length = int(rng.integers(0, 3000))
        offset = int(rng.integers(1, 200))
        expected = (length - n) // offset + 1 if length >= n else 0
        assert len(window_spans(length, n, offset)) == expected


def test_window_slice_counts():
    assert len(window_slice(np.zeros((1000, N_MICS)), 500, 50)) == 11
    assert window_slice(np.zeros((499, N_MICS)), 500, 50) == []
    with pytest.raises(DataError):
        window_spans(100, 10, 0)


# ============================================================================
# BASELINE / SEGMENTS / LABELS
# ============================================================================

def test_baseline_removed_and_noise_floor():
    rng = np.random.default_rng(2)
    counts = (1241 + rng.normal(0.0, 2.0, (1000, N_MICS))).round().astype(np.int32)
    ep = make_episode(np.concatenate([np.zeros(300), np.full(700, 20.0)]), counts)
    centered = subtract_baseline(ep)
    assert np.allclose(centered.signals[:200].mean(axis=0), 0.0, atol=1e-9)
    assert np.all(centered.noise_floor > 1.0) and np.all(centered.noise_floor < 3.0)


def test_baseline_onset_warning():
    ep = make_episode(np.full(800, 20.0))
    with pytest.warns(OnsetInBaselineWarning):
        subtract_baseline(ep)


def test_baseline_contact_warning():
    ep = make_episode(np.zeros(800), contact_index=150)
    with pytest.warns(OnsetInBaselineWarning):
        subtract_baseline(ep)


def test_baseline_needs_enough_samples():
    with pytest.raises(DataError):
        subtract_baseline(make_episode(np.zeros(150)))


def test_segments_drop_short_runs():
    speed = np.concatenate([np.zeros(100), np.full(600, 10.0), np.zeros(50), np.full(300, 10.0), np.zeros(50)])
    segments = segment_drags(make_episode(speed, episode_id="drag-x"))
    assert len(segments) == 1
    assert (segments[0].start, segments[0].stop) == (100, 700)
    assert segments[0].drag_id == "drag-x/seg0"


def test_no_motion_gives_no_segments():
    assert segment_drags(make_episode(np.zeros(1000))) == []


def test_label_last_position_and_median_speed():
    speed = np.concatenate([np.full(50, 10.0), np.full(51, 30.0)])
    ep = make_episode(speed)
    labels = label_window(0, 101, ep.robot_pos_mm, ep.robot_vel_mm_s, "c")
    assert labels.texture == 2
    assert labels.pos_mm == pytest.approx(tuple(ep.robot_pos_mm[100, :2]))
    assert labels.vel_mm_s == pytest.approx(30.0)


def test_label_rejects_gaps():
    ep = make_episode(np.full(100, 10.0))
    with pytest.raises(DataError):
        label_window(50, 150, ep.robot_pos_mm, ep.robot_vel_mm_s, "a")
    pos = ep.robot_pos_mm.copy()
    pos[99] = np.nan
    with pytest.raises(DataError):
        label_window(0, 100, pos, ep.robot_vel_mm_s, "a")


# ============================================================================
# DATASETS
# ============================================================================

@pytest.fixture(scope="module")
def drags():
    layout = build_layout(LayoutConfig())
    return [simulate_drag(layout, tex, vel, seed) for tex, vel, seed in
            (("a", 20.0, 1), ("d", 40.0, 2), ("c", 60.0, 3))]


def test_episode_windows_follow_formula(drags):
    config = PipelineConfig()
    for ep in drags:
        with warnings.catch_warnings():
            warnings.simplefilter("error", OnsetInBaselineWarning)
            samples = episode_windows(ep, 200, config)
        segments = segment_drags(ep, config.vel_threshold_mm_s, config.min_segment_length)
        expected = sum((s.length - 200) // config.window_offset + 1 for s in segments)
        assert len(samples) == expected
        assert all(s.data.shape == (200, N_MICS) for s in samples)


def test_build_dataset_labels(drags):
    ds = build_dataset(drags, 100)
    assert len(ds) > 0
    assert set(ds.label_texture.tolist()) == {0, 2, 3}
    assert set(ds.nominal_velocity.tolist()) == {20.0, 40.0, 60.0}
    assert np.all(ds.noise_floor > 0)
    for drag, vel in ds.drag_velocities().items():
        assert drag.startswith("drag-")
        assert vel in (20.0, 40.0, 60.0)


def test_select_drags(drags):
    ds = build_dataset(drags, 100)
    first = ds.drag_id[0]
    subset = ds.select_drags([first])
    assert len(subset) == int(np.sum(ds.drag_id == first))
    assert len(ds.select_drags([])) == 0


def test_build_dataset_skips_taps(drags):
    layout = build_layout(LayoutConfig())
    tap = simulate_tap(layout, layout.mic_positions[0], 55.0, seed=1)
    assert len(build_dataset([tap], 100)) == 0
    assert isinstance(build_dataset([], 100), WindowDataset)


def test_sample_rate_mismatch_rejected(drags):
    with pytest.raises(DataError):
        episode_windows(drags[0], 100, PipelineConfig(sample_rate_hz=2500.0))
