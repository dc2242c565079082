"""Stochastic-dropout confidence variance scores.

Each trial gets T forward passes with independent dropout masks; the score is
the mean Bernoulli variance of the confidence across passes:

    U(x_i) = (1/T) sum_t (p_t - p_t^2)

with p_t the probability the pass assigns to the trial's own label (the
max-class probability is available as a config option). Mislabeled trials
tend to sit where the confidence is low and mask-sensitive, pushing the
score toward its 0.25 ceiling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .dataset import Dataset
from .errors import ConfigError, UnsupportedArchitectureError
from .influence import ScoreVector

_MC_STREAM = 41

_CONFIDENCE_MODES = ("true-label", "max-class")


@dataclass(frozen=True)
class McConfig:
    """T is the number of stochastic passes per trial."""

    T: int = 30
    dropout_rate_override: float | None = None
    seed: int = 0
    confidence: str = "true-label"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.dropout_rate_override is not None and not (
            0.0 <= self.dropout_rate_override < 1.0
        ):
            raise ConfigError("dropout_rate_override must be in [0, 1)")
        if self.confidence not in _CONFIDENCE_MODES:
            raise ConfigError(f"confidence must be one of {_CONFIDENCE_MODES}")


def bernoulli_variance_mean(p: np.ndarray) -> float:
    """(1/T) sum (p - p^2) over a vector of per-pass confidences."""
    p = np.asarray(p, dtype=np.float64)
    return float(np.mean(p - p * p))


def mc_dropout_scores(spec: M.ModelSpec, theta, d: Dataset, cfg: McConfig) -> ScoreVector:
    """Score every trial by its mean confidence variance over T dropout passes.

    Requires the mlp-dropout architecture. Each trial draws its masks from
    its own seed-derived stream, so scores do not depend on evaluation order
    or thread count. With dropout rate 0 every pass is identical and the
    score reduces to p - p^2 exactly, independent of the seed.
    """
    if spec.arch != M.ARCH_MLP:
        raise UnsupportedArchitectureError(
            f"stochastic-dropout scoring needs mlp-dropout, got {spec.arch}"
        )
    if d.n == 0:
        raise ValueError("cannot score an empty dataset")
    rate = (
        spec.dropout_rate
        if cfg.dropout_rate_override is None
        else cfg.dropout_rate_override
    )
    params = M.unpack(spec, theta)
    X, y = d.features(), d.labels()
    hidden = np.tanh(X @ params["W1"].T + params["b1"])

    scores = np.empty(d.n)
    for i in range(d.n):
        if rate == 0.0:
            td = hidden[i][None, :]
        else:
            rng = np.random.default_rng([_MC_STREAM, cfg.seed, i])
            keep = rng.random((cfg.T, spec.hidden_dim)) < (1.0 - rate)
            td = hidden[i][None, :] * (keep / (1.0 - rate))
        probs = M._softmax(td @ params["W2"].T + params["b2"])
        if cfg.confidence == "true-label":
            p = probs[:, y[i]]
        else:
            p = probs.max(axis=1)
        scores[i] = bernoulli_variance_mean(p)
    return ScoreVector(scores=scores, metric_tag="mc-dropout")
