"""Optimizer steps, schedules, and full training runs."""

import numpy as np
import pytest

from trialrefine.dataset import Dataset, Trial
from trialrefine.errors import ConfigError, NonFiniteGradientError
from trialrefine.model import ModelSpec, init_params
from trialrefine.trainer import (
    AdamState,
    TrainConfig,
    adamw_step,
    evaluate,
    lr_at,
    train,
)


def blob_dataset(n=40, seed=5):
    """Two linearly separable Gaussian blobs, one trial per point."""
    rng = np.random.default_rng(seed)
    half = n // 2
    points = np.concatenate(
        [rng.normal([-2.0, -2.0], 0.4, (half, 2)), rng.normal([2.0, 2.0], 0.4, (n - half, 2))]
    )
    labels = [0] * half + [1] * (n - half)
    trials = [
        Trial(data=p[None, :], label=l, subject_id=0) for p, l in zip(points, labels)
    ]
    return Dataset(trials=trials, n_classes=2)


BLOB_SPEC = ModelSpec("linear-softmax", input_dim=2, n_classes=2, weight_decay=1e-3)


@pytest.fixture(scope="module")
def converged_blob_run():
    cfg = TrainConfig(
        lr_peak=1.5,
        epochs=20000,
        warmup_epochs=0,
        batch_size=64,
        weight_decay=1e-3,
        seed=0,
        grad_tol=1e-8,
        optimizer="gd",
        schedule="constant",
    )
    d = blob_dataset()
    return d, cfg, train(BLOB_SPEC, d, cfg)


# ----------------------------------------------------------------- schedule

def test_lr_reaches_peak_at_warmup_end():
    cfg = TrainConfig(lr_peak=0.01, epochs=100, warmup_epochs=10)
    assert lr_at(10, cfg) == 0.01


def test_lr_ramp_is_linear():
    cfg = TrainConfig(lr_peak=0.01, epochs=100, warmup_epochs=10)
    for e in range(10):
        assert lr_at(e, cfg) == pytest.approx(0.01 * e / 10)


def test_lr_cosine_midpoint_is_half_peak():
    cfg = TrainConfig(lr_peak=0.01, epochs=110, warmup_epochs=10)
    assert lr_at(60, cfg) == pytest.approx(0.005)


def test_lr_near_zero_at_final_epoch():
    cfg = TrainConfig(lr_peak=0.01, epochs=1000, warmup_epochs=10)
    assert lr_at(999, cfg) < 0.01 * 1e-4


def test_lr_constant_schedule_flat_after_warmup():
    cfg = TrainConfig(lr_peak=0.01, epochs=100, warmup_epochs=5, schedule="constant")
    assert all(lr_at(e, cfg) == 0.01 for e in range(5, 100))


def test_lr_no_warmup_starts_at_peak():
    cfg = TrainConfig(lr_peak=0.01, epochs=100, warmup_epochs=0)
    assert lr_at(0, cfg) == 0.01


def test_lr_rejects_out_of_range_epoch():
    cfg = TrainConfig(epochs=10, warmup_epochs=2)
    with pytest.raises(ValueError):
        lr_at(10, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_epochs=20, epochs=10)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(grad_tol=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ConfigError):
        TrainConfig(lr_peak=-0.1)


# ------------------------------------------------------------- AdamW steps

def test_adamw_zero_grad_no_decay_keeps_theta():
    theta = np.array([1.0, -2.0, 3.0])
    new, state = adamw_step(theta, np.zeros(3), AdamState.fresh(3), lr=0.1)
    np.testing.assert_array_equal(new, theta)
    assert state.step == 1


def test_adamw_zero_grad_decay_shrinks_theta():
    theta = np.array([1.0, -2.0, 3.0])
    new, _ = adamw_step(theta, np.zeros(3), AdamState.fresh(3), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(new, (1 - 0.1 * 0.5) * theta, atol=1e-15)


def test_adamw_first_step_is_signed_unit_step():
    # Bias correction makes m_hat = g and v_hat = g * g on step one, so the
    # update is lr * sign(g) up to the epsilon in the denominator.
    theta = np.zeros(4)
    g = np.array([3.0, -0.5, 1e-3, -2e4])
    new, _ = adamw_step(theta, g, AdamState.fresh(4), lr=0.1)
    np.testing.assert_allclose(new, -0.1 * np.sign(g), rtol=1e-4)


def test_adamw_rejects_nonfinite_gradient():
    with pytest.raises(NonFiniteGradientError):
        adamw_step(np.zeros(2), np.array([1.0, np.nan]), AdamState.fresh(2), lr=0.1)


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step(np.zeros(2), np.zeros(3), AdamState.fresh(2), lr=0.1)


# ----------------------------------------------------------- training runs

def test_zero_peak_lr_keeps_initial_params():
    d = blob_dataset(n=10)
    cfg = TrainConfig(lr_peak=0.0, epochs=3, warmup_epochs=0, batch_size=4, seed=7)
    report = train(BLOB_SPEC, d, cfg)
    np.testing.assert_array_equal(report.theta, init_params(BLOB_SPEC, 7))


def test_training_is_bit_deterministic():
    spec = ModelSpec("mlp-dropout", input_dim=2, n_classes=2, hidden_dim=6, dropout_rate=0.4)
    d = blob_dataset(n=16)
    cfg = TrainConfig(lr_peak=2e-3, epochs=25, warmup_epochs=5, batch_size=8, seed=3)
    a, b = train(spec, d, cfg), train(spec, d, cfg)
    assert a.theta.tobytes() == b.theta.tobytes()
    np.testing.assert_array_equal(a.loss_curve, b.loss_curve)
    assert a.final_grad_norm == b.final_grad_norm


def test_converges_on_separable_blobs(converged_blob_run):
    d, cfg, report = converged_blob_run
    assert report.final_grad_norm <= 1e-8
    assert len(report.loss_curve) < cfg.epochs  # stopped early on grad_tol
    assert evaluate(BLOB_SPEC, report.theta, d) == 1.0


def test_unique_minimizer_reached_from_any_seed(converged_blob_run):
    d, cfg, report = converged_blob_run
    from dataclasses import replace

    from trialrefine.model import loss

    other = train(BLOB_SPEC, d, replace(cfg, seed=123))
    assert other.final_grad_norm <= 1e-8
    a = loss(BLOB_SPEC, report.theta, d)
    b = loss(BLOB_SPEC, other.theta, d)
    assert abs(a - b) <= 1e-6


def test_loss_curve_decreases_overall():
    d = blob_dataset()
    cfg = TrainConfig(lr_peak=2e-3, epochs=60, warmup_epochs=5, batch_size=16, seed=0)
    report = train(BLOB_SPEC, d, cfg)
    assert len(report.loss_curve) == 60
    assert report.loss_curve[-1] < report.loss_curve[0]


def test_empty_dataset_rejected():
    cfg = TrainConfig(epochs=1, warmup_epochs=0)
    with pytest.raises(ValueError):
        train(BLOB_SPEC, Dataset(trials=[], n_classes=2), cfg)


def test_dropout_changes_the_run_but_not_determinism():
    base = ModelSpec("mlp-dropout", input_dim=2, n_classes=2, hidden_dim=6, dropout_rate=0.0)
    dropped = ModelSpec("mlp-dropout", input_dim=2, n_classes=2, hidden_dim=6, dropout_rate=0.6)
    d = blob_dataset(n=16)
    cfg = TrainConfig(lr_peak=2e-3, epochs=15, warmup_epochs=3, batch_size=8, seed=1)
    a = train(base, d, cfg)
    b = train(dropped, d, cfg)
    assert a.theta.tobytes() != b.theta.tobytes()


# --------------------------------------------------------------- evaluation

def test_zero_params_predict_class_zero():
    d = blob_dataset(n=12)
    freq = np.mean([t.label == 0 for t in d.trials])
    assert evaluate(BLOB_SPEC, np.zeros(BLOB_SPEC.n_params), d) == freq


def test_single_trial_accuracy_is_zero_or_one():
    t = Trial(data=np.array([[-3.0, -3.0]]), label=0, subject_id=0)
    d = Dataset(trials=[t], n_classes=2)
    wrong = np.array([1.0, 1.0, -1.0, -1.0, 0.0, 0.0])  # class-0 row points away
    right = np.array([-1.0, -1.0, 1.0, 1.0, 0.0, 0.0])
    assert evaluate(BLOB_SPEC, wrong, d) == 0.0
    assert evaluate(BLOB_SPEC, right, d) == 1.0


def test_evaluate_empty_rejected():
    with pytest.raises(ValueError):
        evaluate(BLOB_SPEC, np.zeros(BLOB_SPEC.n_params), Dataset(trials=[], n_classes=2))
