"""Influence scores: damped linear solves against the training Hessian.

The score of training sample i pairs a fixed gradient vector g with the
Hessian-inverse-weighted per-sample gradient:

    s_i = g^T (H + delta I)^{-1} grad_i

where H sums per-sample cross-entropy Hessians (plus n * weight_decay * I)
at the trained parameters and grad_i is the per-sample cross-entropy
gradient. Three pairings are exposed:

* ``total-train``: g = sum of all training gradients. At an exact risk
  minimizer with no decay this g vanishes, so scores collapse toward zero;
  the mode exists for stationarity checks and faithful sweeps.
* ``self``: g = grad_i per sample, giving the non-negative quadratic form
  grad_i^T (H + delta I)^{-1} grad_i, the standard mislabeled-sample
  detector and the default for the refinement pipeline.
* ``reference-set``: g summed over a held-out reference dataset.

Solves use a dense Cholesky factorization when the parameter count is small
and conjugate gradient on the HVP operator otherwise; every returned
solution's residual is re-verified against true HVP products, with
iterative refinement when the factorization alone falls short.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from . import model as M
from .dataset import Dataset
from .errors import ConfigError, ConvergenceError, DataValidationError

_MODES = ("total-train", "self", "reference-set")
METRIC_TAGS = ("influence", "mc-dropout", "random")


@dataclass(frozen=True)
class InfluenceConfig:
    damping: float = 1e-3
    mode: str = "total-train"
    cg_tol: float = 1e-8
    cg_max_iters: int | None = None
    use_dense_if_p_leq: int = 500

    def __post_init__(self):
        if self.damping <= 0:
            raise ConfigError(f"damping must be > 0, got {self.damping}")
        if self.mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.cg_tol <= 0:
            raise ConfigError("cg_tol must be > 0")
        if self.cg_max_iters is not None and self.cg_max_iters < 1:
            raise ConfigError("cg_max_iters must be >= 1 when set")
        if self.use_dense_if_p_leq < 0:
            raise ConfigError("use_dense_if_p_leq must be >= 0")

    def max_iters(self, n_params: int) -> int:
        if self.cg_max_iters is not None:
            return self.cg_max_iters
        return min(10 * n_params, 10_000)


@dataclass
class ScoreVector:
    """Per-trial scores, index-aligned with the dataset they were computed on."""

    scores: np.ndarray
    metric_tag: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not np.isfinite(self.scores).all():
            raise DataValidationError("score vector contains NaN or Inf")
        if self.metric_tag not in METRIC_TAGS:
            raise ValueError(f"metric_tag must be one of {METRIC_TAGS}")

    def __len__(self) -> int:
        return self.scores.size


def save_scores(sv: ScoreVector, d: Dataset, path: str | Path) -> None:
    """CSV export: index, subject_id, label, score, metric_tag rows."""
    if len(sv) != d.n:
        raise ValueError(f"{len(sv)} scores for {d.n} trials")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "subject_id", "label", "score", "metric_tag"])
        for i, t in enumerate(d.trials):
            w.writerow([i, t.subject_id, t.label, f"{sv.scores[i]:.9g}", sv.metric_tag])


def _dense_operator(spec, theta, d, cfg: InfluenceConfig):
    """Factorized damped Hessian returning a solve-many closure."""
    cap = max(2000, cfg.use_dense_if_p_leq)
    H = M.exact_hessian(spec, theta, d, damping=cfg.damping, cap=cap)
    try:
        factor = scipy.linalg.cho_factor(H)
        return lambda B: scipy.linalg.cho_solve(factor, B)
    except scipy.linalg.LinAlgError:
        # Damped mlp Hessians can be indefinite; fall back to a symmetric solve.
        return lambda B: scipy.linalg.solve(H, B, assume_a="sym")


def _verify_or_refine(spec, theta, d, cfg, v, u, solve_many) -> np.ndarray:
    """Drive the true HVP residual under tolerance by iterative refinement.

    A factorization solve is accurate to roundoff amplified by the system's
    conditioning; each refinement pass shrinks the residual by roughly that
    same factor, so a handful of passes either converges or never will.
    """
    vnorm = float(np.linalg.norm(v))
    res = float("inf")
    for _ in range(6):
        r = v - M.hvp(spec, theta, d, u, damping=cfg.damping)
        res = float(np.linalg.norm(r))
        if res <= cfg.cg_tol * vnorm:
            return u
        u = u + solve_many(r)
    raise ConvergenceError("dense solve failed the residual re-check", res)


def _cg_solve(spec, theta, d, v, cfg: InfluenceConfig) -> np.ndarray:
    """Conjugate gradient on the damped HVP operator, x0 = 0."""
    vnorm = float(np.linalg.norm(v))
    tol = cfg.cg_tol * vnorm
    x = np.zeros_like(v)
    r = v.copy()
    p = r.copy()
    rs = float(r @ r)
    res = float(np.sqrt(rs))
    for it in range(cfg.max_iters(v.size)):
        if res <= tol:
            break
        hp = M.hvp(spec, theta, d, p, damping=cfg.damping)
        denom = float(p @ hp)
        if denom <= 0:
            raise ConvergenceError(
                f"CG hit non-positive curvature {denom:.3e}; increase damping", res
            )
        alpha = rs / denom
        x += alpha * p
        r -= alpha * hp
        # Periodically replace the recurrence residual with the true one to
        # stop accumulated drift from faking convergence.
        if (it + 1) % 50 == 0:
            r = v - M.hvp(spec, theta, d, x, damping=cfg.damping)
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        res = float(np.sqrt(rs))
    r = v - M.hvp(spec, theta, d, x, damping=cfg.damping)
    res = float(np.linalg.norm(r))
    if res > tol:
        raise ConvergenceError(
            f"CG stopped above tolerance {tol:.3e} after {cfg.max_iters(v.size)} iterations",
            res,
        )
    return x


def solve_hinv_v(spec: M.ModelSpec, theta, d: Dataset | None, v, cfg: InfluenceConfig) -> np.ndarray:
    """u with ||(H + damping I) u - v|| <= cg_tol * ||v||.

    An empty (or None) dataset means H = 0, so u = v / damping exactly.
    Dense Cholesky when P <= use_dense_if_p_leq, else conjugate gradient.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if not np.isfinite(v).all():
        raise DataValidationError("right-hand side contains NaN or Inf")
    if v.size != spec.n_params:
        raise ValueError(f"v has {v.size} entries, expected {spec.n_params}")
    if d is None or d.n == 0:
        return v / cfg.damping
    if not v.any():
        return np.zeros_like(v)
    if spec.n_params <= cfg.use_dense_if_p_leq:
        solve_many = _dense_operator(spec, theta, d, cfg)
        return _verify_or_refine(spec, theta, d, cfg, v, solve_many(v), solve_many)
    return _cg_solve(spec, theta, d, v, cfg)


def influence_scores(
    spec: M.ModelSpec,
    theta,
    d: Dataset,
    cfg: InfluenceConfig,
    ref: Dataset | None = None,
) -> ScoreVector:
    """Score every trial of ``d`` at the trained parameters ``theta``.

    ``ref`` is required in reference-set mode and rejected otherwise.
    """
    if d.n == 0:
        raise ValueError("cannot score an empty dataset")
    if cfg.mode == "reference-set":
        if ref is None or ref.n == 0:
            raise ValueError("reference-set mode needs a non-empty ref dataset")
    elif ref is not None:
        raise ValueError(f"ref dataset only applies to reference-set mode, not {cfg.mode!r}")

    G = M.ce_gradients(spec, theta, d)
    if cfg.mode in ("total-train", "reference-set"):
        g = G.sum(axis=0) if cfg.mode == "total-train" else M.ce_gradients(
            spec, theta, ref
        ).sum(axis=0)
        # One shared solve: s_i = g~ . grad_i with g~ = (H+dI)^{-1} g, valid
        # because the damped Hessian is symmetric.
        gt = solve_hinv_v(spec, theta, d, g, cfg)
        return ScoreVector(scores=G @ gt, metric_tag="influence")

    # self mode
    if spec.n_params <= cfg.use_dense_if_p_leq:
        solve_many = _dense_operator(spec, theta, d, cfg)
        U = solve_many(G.T)
        scores = np.empty(d.n)
        for i in range(d.n):
            u = _verify_or_refine(spec, theta, d, cfg, G[i], U[:, i], solve_many)
            scores[i] = float(G[i] @ u)
        return ScoreVector(scores=scores, metric_tag="influence")
    scores = np.array(
        [float(G[i] @ solve_hinv_v(spec, theta, d, G[i], cfg)) for i in range(d.n)]
    )
    return ScoreVector(scores=scores, metric_tag="influence")
