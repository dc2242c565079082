"""Empirical risk minimization: AdamW with decoupled weight decay, cosine
learning-rate schedule with linear warmup, seeded mini-batching.

The objective is mean cross-entropy plus ``weight_decay / 2 * ||theta||^2``
with the decay coefficient taken from TrainConfig (callers keep it equal to
the model spec's weight_decay so scoring sees the same risk the trainer
minimized). AdamW feeds the cross-entropy gradient to the moment estimates
and applies the decay directly to the parameters; the plain-GD option steps
along the full risk gradient instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as M
from .dataset import Dataset
from .errors import ConfigError, NonFiniteGradientError

_SHUFFLE_STREAM = 31
_DROPOUT_STREAM = 32

_OPTIMIZERS = ("adamw", "gd")
_SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    ``grad_tol`` enables early stopping on the full-batch risk-gradient norm
    (dropout off), used by convex oracle runs. ``optimizer="gd"`` with
    ``schedule="constant"`` gives plain gradient descent for the same runs.
    """

    lr_peak: float = 2e-3
    epochs: int = 300
    warmup_epochs: int = 10
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0
    grad_tol: float | None = None
    optimizer: str = "adamw"
    schedule: str = "cosine"

    def __post_init__(self):
        if self.lr_peak < 0:
            raise ConfigError(f"lr_peak must be >= 0, got {self.lr_peak}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(
                f"warmup_epochs must be in [0, epochs], got {self.warmup_epochs}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.grad_tol is not None and self.grad_tol <= 0:
            raise ConfigError("grad_tol must be > 0 when set")
        if self.optimizer not in _OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {_OPTIMIZERS}")
        if self.schedule not in _SCHEDULES:
            raise ConfigError(f"schedule must be one of {_SCHEDULES}")


@dataclass
class TrainReport:
    """Outcome of one training run."""

    theta: np.ndarray
    loss_curve: np.ndarray
    final_grad_norm: float


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for ``epoch``: linear ramp to lr_peak, then cosine decay
    (or flat lr_peak under the constant schedule)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_peak * epoch / cfg.warmup_epochs
    if cfg.schedule == "constant":
        return cfg.lr_peak
    t = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, n_params: int) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params))


def adamw_step(
    theta: np.ndarray,
    g: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, AdamState]:
    """One AdamW update; decay is decoupled and applied to the pre-update theta."""
    if theta.shape != g.shape:
        raise ValueError(f"theta shape {theta.shape} != gradient shape {g.shape}")
    if not np.isfinite(g).all():
        raise NonFiniteGradientError(
            f"gradient contains {np.count_nonzero(~np.isfinite(g))} non-finite entries"
        )
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    new_theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * theta
    return new_theta, AdamState(m=m, v=v, step=step)


def _risk_grad_norm(spec: M.ModelSpec, theta: np.ndarray, xy, wd: float) -> float:
    g = M.ce_grad(spec, theta, xy) + wd * theta
    return float(np.linalg.norm(g))


def train(spec: M.ModelSpec, d: Dataset, cfg: TrainConfig) -> TrainReport:
    """Run ``cfg.epochs`` of shuffled mini-batches from a fresh seeded init.

    Dropout is active for mlp-dropout training passes. loss_curve holds the
    per-epoch size-weighted mean of batch objectives (cross-entropy under the
    masks actually used, plus the L2 term). Deterministic in (spec, d, cfg).
    """
    if d.n == 0:
        raise ValueError("cannot train on an empty dataset")
    X, y = d.features(), d.labels()
    n = d.n
    theta = M.init_params(spec, cfg.seed)
    shuffle_rng = np.random.default_rng([_SHUFFLE_STREAM, cfg.seed])
    dropout_rng = np.random.default_rng([_DROPOUT_STREAM, cfg.seed])
    use_masks = spec.arch == M.ARCH_MLP and spec.dropout_rate > 0.0
    state = AdamState.fresh(theta.size)
    wd = cfg.weight_decay

    curve: list[float] = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            xb, yb = X[sel], y[sel]
            masks = (
                M.draw_dropout_masks(spec, len(sel), dropout_rng) if use_masks else None
            )
            batch_ce = M.ce_loss(spec, theta, (xb, yb), masks)
            epoch_loss += len(sel) * (batch_ce + 0.5 * wd * float(theta @ theta))
            g_ce = M.ce_grad(spec, theta, (xb, yb), masks)
            if not np.isfinite(g_ce).all():
                raise NonFiniteGradientError(
                    f"non-finite gradient in epoch {epoch} at batch offset {start}"
                )
            if cfg.optimizer == "adamw":
                theta, state = adamw_step(
                    theta, g_ce, state, lr=lr, weight_decay=wd
                )
            else:
                theta = theta - lr * (g_ce + wd * theta)
        curve.append(epoch_loss / n)
        if cfg.grad_tol is not None:
            if _risk_grad_norm(spec, theta, (X, y), wd) <= cfg.grad_tol:
                break
    return TrainReport(
        theta=theta,
        loss_curve=np.asarray(curve),
        final_grad_norm=_risk_grad_norm(spec, theta, (X, y), wd),
    )


def evaluate(spec: M.ModelSpec, theta, d: Dataset) -> float:
    """Fraction of trials whose argmax probability matches the label.

    Dropout off; argmax ties resolve to the lowest class index.
    """
    if d.n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = M.predict(spec, theta, d.features())
    return float(np.mean(preds == d.labels()))
