"""Tests for contact detectors, F/T conditioning and the response-time study."""
import dataclasses

import numpy as np
import pytest

from config import LayoutConfig, TapParams
from contact_detection import (ContactEvent, MicContactDetector, analyze_taps, bias_episode,
                               ft_contact_detect_offline, ft_threshold_crossing, ground_truth_event, mic_contact_detect,
                               relative_response_time, remove_flatline, response_time_study, stream_detect)
from errors import DataError
from sensor_sim import build_layout, episode_seed, simulate_tap, tap_location


@pytest.fixture(scope="module")
def layout():
    return build_layout(LayoutConfig())


def step_stream(n=1000, at=500, height=20.0, sigma=0.0, seed=0):
    rng = np.random.default_rng(seed)
    x = 1241.0 + sigma * rng.standard_normal(n)
    x[at:] += height
    return x


# ============================================================================
# MICROPHONE DETECTOR
# ============================================================================

def test_no_false_positives_on_noise():
    rng = np.random.default_rng(123)
    for _ in range(100):
        stream = np.round(1241.0 + 2.0 * rng.standard_normal(100_000))
        assert mic_contact_detect(stream) is None


def test_detects_step_exactly():
    event = mic_contact_detect(step_stream())
    assert event.time_index == 500
    assert event.time_s == pytest.approx(500 / 2300.0)
    assert event.source == "mic"


def test_step_below_threshold_is_ignored():
    assert mic_contact_detect(step_stream(height=17.0)) is None


def test_detection_is_causal():
    x = step_stream(sigma=1.0, seed=4)
    full = mic_contact_detect(x)
    assert mic_contact_detect(x[:full.time_index + 1]).time_index == full.time_index
    assert mic_contact_detect(x[:full.time_index]) is None


def test_streaming_matches_batch():
    x = step_stream(n=3000, at=1700, height=25.0, sigma=2.0, seed=9)
    detector = MicContactDetector()
    events = list(stream_detect(x, detector))
    assert len(events) == 1
    assert events[0].time_index == mic_contact_detect(x).time_index


def test_detector_latches_until_reset():
    detector = MicContactDetector(history=3)
    for value in (0.0, 0.0, 0.0):
        assert detector.feed(value) is None
    assert detector.feed(50.0) is not None
    assert detector.feed(500.0) is None
    detector.reset()
    assert detector.event is None
    for value in (0.0, 0.0, 0.0):
        detector.feed(value)
    assert detector.feed(50.0).time_index == 3


def test_short_stream_has_no_event():
    assert mic_contact_detect(np.zeros(20)) is None


# ============================================================================
# F/T HEURISTIC AND CONDITIONING
# ============================================================================

def ramp_force(n=300, onset=100, slope=0.2):
    i = np.arange(n)
    return np.where(i >= onset, -slope * (i - onset), 0.0)


def test_offline_ft_finds_ramp_start():
    event = ft_contact_detect_offline(ramp_force())
    assert event.time_index == 100
    assert event.method == "offline_ft"


def test_offline_ft_no_contact():
    assert ft_contact_detect_offline(np.zeros(300)) is None
    assert ft_contact_detect_offline(ramp_force(n=20)) is None


def test_offline_ft_noisy_ramp():
    rng = np.random.default_rng(0)
    i = np.arange(300)
    f = np.clip(-0.06 * (i - 100), -3.0, 0.0) + rng.uniform(-0.05, 0.05, 300)
    event = ft_contact_detect_offline(f)
    assert abs(event.time_index - 100) <= 2
    assert event.time_index < ft_threshold_crossing(f)


def test_offline_ft_shallow_ramp():
    assert ft_contact_detect_offline(np.maximum(ramp_force(slope=0.01), -0.4)) is None


def test_offline_ft_window_must_cover_offsets():
    with pytest.raises(DataError):
        ft_contact_detect_offline(ramp_force(), window=20)


def test_offline_ft_on_simulated_tap(layout):
    ep = simulate_tap(layout, layout.mic_positions[0], 100.0, seed=2)
    tared = bias_episode(ep)
    event = ft_contact_detect_offline(tared.ft_n[:, 2], ep.sample_rate_hz, ep.episode_id)
    assert 0 <= ep.metadata["contact_index"] - event.time_index <= 3
    assert ground_truth_event(ep).time_index == ep.metadata["contact_index"]


def test_bias_episode_removes_drift(layout):
    ep = simulate_tap(layout, layout.mic_positions[1], 55.0, seed=3)
    tared = bias_episode(ep, (0, 200))
    assert np.allclose(tared.ft_n[:200].mean(axis=0), 0.0, atol=1e-12)
    assert ep.ft_n is not tared.ft_n


def test_bias_span_must_precede_contact(layout):
    ep = simulate_tap(layout, layout.mic_positions[1], 55.0, seed=3)
    with pytest.raises(DataError):
        bias_episode(ep, (0, ep.metadata["contact_index"] + 10))
    with pytest.raises(DataError):
        bias_episode(ep, (0, ep.n_samples + 1))


def test_flatline_episodes_removed(layout):
    good = simulate_tap(layout, layout.mic_positions[0], 55.0, seed=5)
    bad = simulate_tap(layout, layout.mic_positions[0], 55.0, seed=6,
                       params=TapParams(ft_flatline_probability=1.0))
    kept, removed = remove_flatline([good, bad])
    assert [ep.episode_id for ep in kept] == [good.episode_id]
    assert removed == [bad.episode_id]


def test_precontact_flatline_is_kept(layout):
    good = simulate_tap(layout, layout.mic_positions[0], 55.0, seed=5)
    ft = good.ft_n.copy()
    ft[10:40] = ft[10]
    stuck = dataclasses.replace(good, ft_n=ft)
    kept, removed = remove_flatline([stuck])
    assert kept == [stuck] and removed == []


def test_offline_label_precedes_threshold_crossing(layout):
    for velocity in (10.0, 55.0, 100.0):
        for distance in (0.0, 2.0, 4.0, 6.0):
            for seed in range(3):
                location = tap_location(layout, seed % 4, distance, np.random.default_rng(seed))
                seed_key = episode_seed(9, int(velocity), int(distance), seed)
                ep = bias_episode(simulate_tap(layout, location, velocity, seed=seed_key))
                fz = ep.ft_n[:, 2]
                event = ft_contact_detect_offline(fz, ep.sample_rate_hz, ep.episode_id)
                assert event.time_index <= ft_threshold_crossing(fz), ep.episode_id


def test_relative_response_time():
    mic = ContactEvent("tap", 460, 0.2, "mic", "realtime_mic", 0)
    ft = ContactEvent("tap", 453, 0.197, "ft", "offline_ft")
    assert relative_response_time(mic, ft) == pytest.approx(3.0)
    with pytest.raises(DataError):
        relative_response_time(mic, ContactEvent("other", 0, 0.0, "ft", "offline_ft"))


# ============================================================================
# RESPONSE-TIME STUDY
# ============================================================================

@pytest.fixture(scope="module")
def study(layout):
    return response_time_study(layout, episodes_per_cell=45, base_seed=42)


def test_study_table_shape(study):
    assert list(study.table.index) == ["10 mm/s", "55 mm/s", "100 mm/s"]
    assert list(study.table.columns) == ["0 mm", "2 mm", "4 mm", "6 mm"]


def test_far_slow_cell_is_missing(study):
    assert study.table.loc["10 mm/s", "6 mm"] == "-"


def test_reported_cells_in_range(study):
    shown = study.cells[study.cells["cell"] != "-"]
    assert len(shown) == 11
    assert shown["mean_ms"].between(1.0, 8.0).all()


def test_response_time_falls_with_velocity(study):
    shown = study.cells[study.cells["cell"] != "-"]
    for _, group in shown.groupby("distance_mm"):
        means = group.sort_values("velocity_mm_s")["mean_ms"].to_numpy()
        assert np.all(np.diff(means) <= 0.0)


def test_small_cells_are_flagged(layout, caplog):
    episodes = [(55.0, 0.0, simulate_tap(layout, layout.mic_positions[0], 55.0, seed=s)) for s in range(3)]
    with caplog.at_level("WARNING"):
        result = analyze_taps(episodes, [0.0], [55.0])
    assert "fewer than 30" in caplog.text
    assert result.cells["n_episodes"].tolist() == [3]
    assert result.review == []
    assert "reference_ms" in result.to_dict()
