"""Tests for splits, the training loop, metrics and baselines."""
import dataclasses

import numpy as np
import pandas as pd
import pytest
import torch

import experiment_harness as harness
from config import LayoutConfig, TrainHyper
from errors import DataError, SplitLeakageError
from neural_model import ModelConfig
from sensor_sim import N_MICS, build_layout
from signal_pipeline import WindowDataset


TINY = ModelConfig(kernel_sizes=(5, 3, 3), strides=(2, 2, 1), latent_channels=4, d_model=8, n_heads=2,
                   n_layers=1, ff_width=16, max_tokens=8)


def fake_dataset(velocities=(20.0, 30.0, 40.0, 50.0, 60.0), drags_per_velocity=10, windows_per_drag=3,
                 window=40, seed=0) -> WindowDataset:
    rng = np.random.default_rng(seed)
    rows = []
    for v in velocities:
        for k in range(drags_per_velocity):
            for w in range(windows_per_drag):
                rows.append((f"drag-v{v:g}-{k}/seg0", f"drag-v{v:g}-{k}", v, k % 4, w))
    n = len(rows)
    texture = np.array([r[3] for r in rows], dtype=np.int64)
    data = rng.normal(0.0, 1.0, (n, window, N_MICS))
    data[:, :, 0] += texture[:, None] * 2.0
    return WindowDataset(
        data=data,
        label_texture=texture,
        label_pos_mm=rng.uniform(0.0, 24.0, (n, 2)),
        label_vel_mm_s=np.array([r[2] for r in rows]) + rng.normal(0.0, 1.0, n),
        nominal_velocity=np.array([r[2] for r in rows]),
        drag_id=np.array([r[0] for r in rows]),
        episode_id=np.array([r[1] for r in rows]),
        noise_floor=np.ones((n, N_MICS)),
        window_start=np.array([r[4] * 50 for r in rows], dtype=np.int64),
        window_size=window,
    )


@pytest.fixture(scope="module")
def dataset():
    return fake_dataset()


# ============================================================================
# SPLITS
# ============================================================================

def _assert_hygiene(plan, ds):
    velocities = ds.drag_velocities()
    for fold in plan.folds:
        train, val, test = set(fold.train), set(fold.val), set(fold.test)
        assert not (train & val or train & test or val & test)
        assert train | val | test == set(velocities)
        if fold.held_out_velocity is not None:
            assert {velocities[d] for d in test} == {fold.held_out_velocity}


def test_held_out_velocity_splits(dataset):
    plan = harness.make_held_out_velocity_splits(dataset, seed=1)
    assert [f.held_out_velocity for f in plan.folds] == [20.0, 30.0, 40.0, 50.0, 60.0]
    _assert_hygiene(plan, dataset)
    for fold in plan.folds:
        assert len(fold.test) == 10
        assert len(fold.val) >= 1


def test_held_out_keeps_odd_velocities_in_training():
    ds = fake_dataset(velocities=(20.0, 25.0, 30.0), drags_per_velocity=4)
    plan = harness.make_held_out_velocity_splits(ds, velocities=(20.0, 30.0))
    velocities = ds.drag_velocities()
    for fold in plan.folds:
        assert 25.0 in {velocities[d] for d in fold.train + fold.val}


def test_missing_held_out_velocity(dataset):
    with pytest.raises(DataError, match="45"):
        harness.make_held_out_velocity_splits(dataset, velocities=(45.0,))


def test_velocity_cv_splits_partition_drags(dataset):
    plan = harness.make_velocity_cv_splits(dataset, rounds=5, seed=3)
    _assert_hygiene(plan, dataset)
    tests = [set(f.test) for f in plan.folds]
    assert sum(len(t) for t in tests) == len(dataset.drag_velocities())
    assert set.union(*tests) == set(dataset.drag_velocities())
    velocities = dataset.drag_velocities()
    for t in tests:
        assert {velocities[d] for d in t} == {20.0, 30.0, 40.0, 50.0, 60.0}


def test_velocity_cv_needs_enough_drags(dataset):
    with pytest.raises(DataError):
        harness.make_velocity_cv_splits(dataset, rounds=11)


def test_splits_are_seeded(dataset):
    a = harness.make_held_out_velocity_splits(dataset, seed=5)
    b = harness.make_held_out_velocity_splits(dataset, seed=5)
    assert a == b


def test_validate_plan_detects_leakage(dataset):
    plan = harness.make_held_out_velocity_splits(dataset, velocities=(20.0,))
    fold = plan.folds[0]
    leaked = dataclasses.replace(fold, train=fold.train + (fold.test[0],))
    with pytest.raises(SplitLeakageError):
        harness.validate_plan(dataclasses.replace(plan, folds=(leaked,)))

    impure = dataclasses.replace(fold, test=fold.test + (fold.train[0],), train=fold.train[1:])
    with pytest.raises(SplitLeakageError):
        harness.validate_plan(dataclasses.replace(plan, folds=(impure,)), dataset)


def test_plan_dict_round_trip(dataset):
    plan = harness.make_velocity_cv_splits(dataset, rounds=2)
    assert harness.SplitPlan.from_dict(plan.to_dict()) == plan


# ============================================================================
# TRAINING
# ============================================================================

@pytest.fixture(scope="module")
def small():
    return fake_dataset(velocities=(20.0, 40.0), drags_per_velocity=6, windows_per_drag=2)


def test_train_selects_best_validation_epoch(small):
    fold = harness.make_held_out_velocity_splits(small, velocities=(40.0,)).folds[0]
    result = harness.train(TINY, fold, small, TrainHyper(max_epochs=3, lr=1e-3))
    assert list(result.curves.columns) == ["epoch", "train_loss", "val_loss"]
    assert len(result.curves) == 3
    assert result.best_val_loss == pytest.approx(result.curves["val_loss"].min())
    assert result.best_val_loss <= result.curves["val_loss"].iloc[0]


def test_training_is_reproducible(small):
    fold = harness.make_held_out_velocity_splits(small, velocities=(40.0,)).folds[0]
    hyper = TrainHyper(max_epochs=2, lr=1e-3)
    a = harness.train(TINY, fold, small, hyper)
    b = harness.train(TINY, fold, small, hyper)
    pd.testing.assert_frame_equal(a.curves, b.curves)


def test_training_loss_is_read_without_grad_warning(small, recwarn):
    fold = harness.make_held_out_velocity_splits(small, velocities=(40.0,)).folds[0]
    harness.train(TINY, fold, small, TrainHyper(max_epochs=1))
    assert not [w for w in recwarn if "requires_grad" in str(w.message)]


def test_train_requires_epochs(small):
    fold = harness.make_held_out_velocity_splits(small, velocities=(40.0,)).folds[0]
    with pytest.raises(DataError):
        harness.train(TINY, fold, small, TrainHyper())


@pytest.mark.parametrize("task", ["localize", "velocity"])
def test_regression_training_runs(small, task):
    fold = harness.make_held_out_velocity_splits(small, velocities=(40.0,)).folds[0]
    result = harness.train(dataclasses.replace(TINY, task=task), fold, small, TrainHyper(max_epochs=1))
    pred = harness.predict(result.model, small.select_drags(fold.test))
    expected = (len(small.select_drags(fold.test)), 2) if task == "localize" else (len(small.select_drags(fold.test)),)
    assert pred.shape == expected
    assert np.all(np.isfinite(pred))


@pytest.mark.parametrize("task", ["texture", "localize", "velocity"])
def test_fold_report_per_task(small, task):
    fold = harness.make_held_out_velocity_splits(small, velocities=(40.0,)).folds[0]
    result = harness.train(dataclasses.replace(TINY, task=task), fold, small, TrainHyper(max_epochs=1))
    test = small.select_drags(fold.test)
    report = harness.fold_report(task, result.model, test, build_layout(LayoutConfig()), fold)
    assert report["held_out_velocity"] == 40.0
    assert report["n_test"] == len(test)
    if task == "texture":
        assert report["confusion"].sum() == len(test)
        assert 0.0 <= report["accuracy"] <= 1.0
    elif task == "localize":
        assert report["median_error_mm"] >= 0.0
        assert np.isfinite(report["snr_mean_error_mm"])
    else:
        assert report["history_s"] == pytest.approx(40 / 2000.0)
        assert report["bins"]["bin_mm_s"].tolist() == [40.0]


def test_fold_report_rejects_empty_test(small):
    fold = harness.make_held_out_velocity_splits(small, velocities=(40.0,)).folds[0]
    result = harness.train(TINY, fold, small, TrainHyper(max_epochs=1))
    with pytest.raises(DataError):
        harness.eval_texture(result.model, small.select_drags(()))


# ============================================================================
# METRICS
# ============================================================================

def test_texture_metrics_perfect():
    y = np.array([0, 1, 2, 3, 3])
    report = harness.texture_metrics(y, y)
    assert report["accuracy"] == 1.0
    assert np.array_equal(report["confusion"], np.diag([1, 1, 1, 2]))
    assert report["adjacency_share"] is None


def test_texture_metrics_rows_and_adjacency():
    y_true = np.array([0, 0, 1, 2, 3, 3])
    y_pred = np.array([0, 1, 1, 0, 3, 2])
    report = harness.texture_metrics(y_true, y_pred)
    assert report["confusion"].sum(axis=1).tolist() == [2, 1, 1, 2]
    assert report["accuracy"] == pytest.approx(3 / 6)
    # errors: 0->1 adjacent, 2->0 not, 3->2 adjacent
    assert report["adjacency_share"] == pytest.approx(2 / 3)
    with pytest.raises(DataError):
        harness.texture_metrics(np.array([]), np.array([]))


def test_localization_metrics():
    report = harness.localization_metrics(np.array([[3.0, 4.0], [1.0, 1.0]]), np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert report["mean_error_mm"] == pytest.approx(2.5)
    assert report["median_error_mm"] == pytest.approx(2.5)
    assert harness.localization_metrics(np.ones((3, 2)), np.ones((3, 2)))["mean_error_mm"] == 0.0


def test_velocity_bins():
    assert harness.velocity_bin(42.4) == 40.0
    assert harness.velocity_bin(42.6) == 45.0
    assert harness.velocity_bin(12.0) == 20.0


def test_velocity_metrics_absent_bins():
    true = np.array([20.0, 21.0, 40.0])
    frame = harness.velocity_metrics(true, true, np.array([20.0, 20.0, 40.0]))
    assert frame["bin_mm_s"].tolist() == [20.0, 40.0]
    assert frame["mean_error"].tolist() == [0.0, 0.0]
    table = harness.velocity_table({0.10: frame})
    assert table.loc["0.1 s", "20"] == "0.0 / 0.0"
    assert table.loc["0.1 s", "30"] == "-"


def test_velocity_metrics_bin_by_nominal_velocity():
    # ramp-up windows of a 50 mm/s drag stay in the 50 bin
    true = np.array([8.0, 15.0, 50.0, 50.0])
    pred = np.array([10.0, 15.0, 48.0, 50.0])
    frame = harness.velocity_metrics(pred, true, np.full(4, 50.0))
    assert frame["bin_mm_s"].tolist() == [50.0]
    assert frame["count"].tolist() == [4]
    assert frame["mean_error"].iloc[0] == pytest.approx(1.0)

    off_grid = harness.velocity_metrics(true, true, np.array([42.4, 42.6, 35.0, 55.0]))
    assert off_grid["bin_mm_s"].tolist() == [35.0, 40.0, 45.0, 55.0]


def test_velocity_metrics_length_mismatch():
    with pytest.raises(DataError):
        harness.velocity_metrics(np.ones(3), np.ones(3), np.ones(2))


def test_range_percentage():
    assert harness.range_percentage(4.0) == pytest.approx(10.0)


def test_texture_summary_excludes_slowest():
    folds = [{"held_out_velocity": 20.0, "accuracy": 0.5}, {"held_out_velocity": 40.0, "accuracy": 0.9},
             {"held_out_velocity": 60.0, "accuracy": 0.8}]
    summary = harness.texture_summary(folds)
    assert summary["mean_accuracy"] == pytest.approx(2.2 / 3)
    assert summary["mean_accuracy_excluding_slowest"] == pytest.approx(0.85)


# ============================================================================
# BASELINES
# ============================================================================

@pytest.fixture(scope="module")
def layout():
    return build_layout(LayoutConfig())


def _decay_window(layout, contact):
    gains = layout.receptive_gain(np.asarray(contact))
    t = np.arange(100)
    return np.sin(0.3 * t)[:, None] * gains[None, :]


def test_snr_baseline_at_mic(layout):
    for k, mic in enumerate(layout.mic_positions):
        guess = harness.snr_baseline_localize(_decay_window(layout, mic), layout, np.ones(N_MICS))
        assert np.linalg.norm(guess - mic) <= 1e-9


def test_snr_baseline_midpoint(layout):
    mid = layout.mic_positions[:2].mean(axis=0)
    guess = harness.snr_baseline_localize(_decay_window(layout, mid), layout, np.ones(N_MICS))
    assert np.array_equal(guess, layout.mic_positions[0])
    assert np.linalg.norm(guess - mid) == pytest.approx(4.0)


def test_snr_baseline_needs_noise_floor(layout):
    with pytest.raises(DataError):
        harness.snr_baseline_localize(np.zeros((100, N_MICS)), layout, None)
    with pytest.raises(DataError):
        harness.snr_baseline_localize(np.zeros((100, N_MICS)), layout, np.zeros(N_MICS))


class FakePositionModel(torch.nn.Module):
    """x-position proportional to the mean |channel 0| of the window."""

    def __init__(self):
        super().__init__()
        self.scale = torch.nn.Parameter(torch.tensor(3.0, dtype=torch.float64))

    def forward(self, x, task=None):
        x_mm = self.scale * x[:, :, 0].abs().mean(dim=1)
        return torch.stack([x_mm, torch.zeros_like(x_mm)], dim=1)


def test_position_baseline_arithmetic():
    model = FakePositionModel()
    window = np.zeros((200, N_MICS))
    assert harness.velocity_from_position_baseline(model, window) == pytest.approx(0.0)
    window[:100, 0] = np.where(np.arange(100) % 2 == 0, 1.0, -1.0)
    assert harness.velocity_from_position_baseline(model, window) == pytest.approx(30.0)


def test_position_baseline_needs_200_steps():
    with pytest.raises(DataError):
        harness.velocity_from_position_baseline(FakePositionModel(), np.zeros((100, N_MICS)))
