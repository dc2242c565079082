"""Score -> prune -> retrain orchestration.

One fold runs three stages: train on the full fold training set, score every
training trial with the configured metric, remove the round(ratio * n)
highest-scoring trials, and retrain from a fresh initialization with the
same seed. The grid search crosses leave-one-subject-out folds with a
refinement-ratio grid and a seed list, plus a random-removal control, and
summarizes mean/std accuracy per ratio.

Stage-I training and scoring are shared across the ratio grid inside each
(fold, seed) unit; results are bit-identical to running each cell alone
because training is deterministic in its inputs.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset, EmsConfig, ems_standardize_dataset, round_half_up, split_loso, take_indices
from .errors import ConfigError
from .influence import InfluenceConfig, ScoreVector, influence_scores
from .model import ModelSpec
from .trainer import TrainConfig, evaluate, train
from .uncertainty import McConfig, mc_dropout_scores

_RANDOM_STREAM = 51

_METRICS = ("influence", "mc-dropout", "random")


@dataclass
class RefinementPlan:
    """Which trials a pruning pass removes and at what score threshold.

    ``threshold`` is the smallest removed score (+inf when nothing is
    removed, NaN for random plans where no scores exist).
    """

    ratio: float
    threshold: float
    removed_indices: list[int]
    metric_tag: str

    def __post_init__(self):
        self.removed_indices = sorted(int(i) for i in self.removed_indices)
        if len(set(self.removed_indices)) != len(self.removed_indices):
            raise ValueError("removed_indices contains duplicates")


def refine_dataset(d: Dataset, s: ScoreVector, ratio: float) -> tuple[Dataset, RefinementPlan]:
    """Remove the round(ratio * n) highest-scoring trials.

    Ties at the threshold are broken by removing the lower original index
    first. The kept dataset preserves original relative order and carries
    its slice of the noise mask.
    """
    if len(s) != d.n:
        raise ValueError(f"{len(s)} scores for {d.n} trials")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"ratio must be in [0, 1), got {ratio}")
    k = round_half_up(ratio * d.n)
    # Stable sort of the negated scores: descending by score, ascending by
    # index among ties, which is exactly the removal priority.
    order = np.argsort(-s.scores, kind="stable")
    removed = sorted(int(i) for i in order[:k])
    threshold = float(s.scores[order[k - 1]]) if k else math.inf
    keep = np.setdiff1d(np.arange(d.n), removed, assume_unique=True)
    plan = RefinementPlan(
        ratio=ratio, threshold=threshold, removed_indices=removed, metric_tag=s.metric_tag
    )
    return take_indices(d, keep), plan


def random_dropout(d: Dataset, ratio: float, seed: int) -> tuple[Dataset, RefinementPlan]:
    """Remove a uniform random subset of the same size a scored plan would."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"ratio must be in [0, 1), got {ratio}")
    k = round_half_up(ratio * d.n)
    rng = np.random.default_rng([_RANDOM_STREAM, seed])
    removed = sorted(int(i) for i in rng.choice(d.n, size=k, replace=False))
    keep = np.setdiff1d(np.arange(d.n), removed, assume_unique=True)
    plan = RefinementPlan(
        ratio=ratio, threshold=math.nan, removed_indices=removed, metric_tag="random"
    )
    return take_indices(d, keep), plan


def plan_recovery(plan: RefinementPlan, noise_mask: np.ndarray | None) -> tuple[float, float]:
    """(precision, recall) of the removal against ground-truth flips.

    NaN where undefined: no mask, nothing removed, or nothing flipped.
    """
    if noise_mask is None or not plan.removed_indices:
        return math.nan, math.nan
    flipped = int(noise_mask.sum())
    if flipped == 0:
        return math.nan, math.nan
    hit = int(noise_mask[plan.removed_indices].sum())
    return hit / len(plan.removed_indices), hit / flipped


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one experiment needs: model, training, metric, grid."""

    model: ModelSpec
    train: TrainConfig
    metric: str = "influence"
    influence: InfluenceConfig = field(default_factory=lambda: InfluenceConfig(mode="self"))
    mc: McConfig = field(default_factory=McConfig)
    ems: EmsConfig = field(default_factory=EmsConfig)
    ratios: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4)
    seeds: tuple[int, ...] = tuple(range(10))

    def __post_init__(self):
        if self.metric not in _METRICS:
            raise ConfigError(f"metric must be one of {_METRICS}, got {self.metric!r}")
        for r in self.ratios:
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"ratio {r} outside [0, 1)")
        if len(set(self.ratios)) != len(self.ratios):
            raise ConfigError("ratio grid contains duplicates")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")


@dataclass
class FoldOutcome:
    """One (train/test, ratio, seed) pipeline run."""

    accuracy: float
    plan: RefinementPlan | None
    n_removed: int
    precision: float
    recall: float


@dataclass
class CellResult:
    """FoldOutcome keyed for the experiment grid; fold is the held-out subject."""

    fold: int
    ratio: float
    seed: int
    accuracy: float
    n_removed: int
    recall: float
    precision: float


@dataclass
class RatioSummary:
    ratio: float
    mean: float
    std: float


@dataclass
class ExperimentResult:
    """Raw grid cells (sorted by fold, ratio, seed) plus per-ratio summaries."""

    cells: list[CellResult]
    summary: list[RatioSummary]
    best_ratio: float | None


def _score_training_set(cfg: PipelineConfig, theta, train_d: Dataset, seed: int) -> ScoreVector:
    if cfg.metric == "influence":
        return influence_scores(cfg.model, theta, train_d, cfg.influence)
    if cfg.metric == "mc-dropout":
        return mc_dropout_scores(cfg.model, theta, train_d, replace(cfg.mc, seed=seed))
    raise ConfigError(f"metric {cfg.metric!r} has no score vector")


def _fold_outcomes(
    train_d: Dataset,
    test_d: Dataset,
    cfg: PipelineConfig,
    ratios: tuple[float, ...],
    seed: int,
) -> list[FoldOutcome]:
    """All requested ratios for one fold and seed, sharing Stage I and scores.

    Inputs must already be standardized; ratio 0 short-circuits to the plain
    train-and-evaluate baseline.
    """
    if train_d.n == 0:
        raise ValueError("empty training split")
    tc = replace(cfg.train, seed=seed)
    stage1 = train(cfg.model, train_d, tc)

    scores: ScoreVector | None = None
    if cfg.metric != "random" and any(r > 0 for r in ratios):
        scores = _score_training_set(cfg, stage1.theta, train_d, seed)

    outcomes = []
    for ratio in ratios:
        if ratio == 0.0:
            outcomes.append(
                FoldOutcome(
                    accuracy=evaluate(cfg.model, stage1.theta, test_d),
                    plan=None,
                    n_removed=0,
                    precision=math.nan,
                    recall=math.nan,
                )
            )
            continue
        if cfg.metric == "random":
            kept, plan = random_dropout(train_d, ratio, seed)
        else:
            kept, plan = refine_dataset(train_d, scores, ratio)
        if kept.n == 0:
            raise ValueError(f"pruning at ratio {ratio} emptied the training set")
        stage3 = train(cfg.model, kept, tc)
        precision, recall = plan_recovery(plan, train_d.noise_mask)
        outcomes.append(
            FoldOutcome(
                accuracy=evaluate(cfg.model, stage3.theta, test_d),
                plan=plan,
                n_removed=len(plan.removed_indices),
                precision=precision,
                recall=recall,
            )
        )
    return outcomes


def run_fold(
    train_d: Dataset, test_d: Dataset, cfg: PipelineConfig, ratio: float, seed: int
) -> FoldOutcome:
    """One full score-prune-retrain pass; see :func:`_fold_outcomes`."""
    return _fold_outcomes(train_d, test_d, cfg, (ratio,), seed)[0]


def grid_search(
    cfg: PipelineConfig,
    d: Dataset,
    threads: int = 1,
    log=None,
) -> ExperimentResult:
    """Cross folds x ratios x seeds; summarize accuracy per ratio.

    Standardization runs once up front (it is per-trial and causal, so the
    result is identical before or after splitting). Units of work are
    (fold, seed) pairs; results are keyed and re-ordered afterwards, so the
    thread count never changes the outcome.
    """
    subjects = d.subjects()
    if len(subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least 2 subjects")
    if threads < 1:
        raise ValueError("threads must be >= 1")
    dp = ems_standardize_dataset(d, cfg.ems)
    ratios = tuple(sorted(cfg.ratios))
    units = [(subj, seed) for subj in subjects for seed in cfg.seeds]

    def run_unit(unit):
        subj, seed = unit
        train_d, test_d = split_loso(dp, subj)
        out = _fold_outcomes(train_d, test_d, cfg, ratios, seed)
        if log is not None:
            log(f"fold {subj} seed {seed} done")
        return unit, out

    if threads == 1:
        done = dict(run_unit(u) for u in units)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = dict(pool.map(run_unit, units))

    cells = [
        CellResult(
            fold=subj,
            ratio=ratio,
            seed=seed,
            accuracy=out.accuracy,
            n_removed=out.n_removed,
            recall=out.recall,
            precision=out.precision,
        )
        for subj in subjects
        for ratio in ratios
        for seed in cfg.seeds
        for out in [done[(subj, seed)][ratios.index(ratio)]]
    ]
    cells.sort(key=lambda c: (c.fold, c.ratio, c.seed))
    summary = summarize(cells)
    best = best_ratio(summary)
    return ExperimentResult(cells=cells, summary=summary, best_ratio=best)


def summarize(cells: list[CellResult]) -> list[RatioSummary]:
    """Per-ratio mean and population std of accuracy over all cells."""
    out = []
    for ratio in sorted({c.ratio for c in cells}):
        acc = np.array([c.accuracy for c in cells if c.ratio == ratio])
        out.append(RatioSummary(ratio=ratio, mean=float(acc.mean()), std=float(acc.std())))
    return out


def best_ratio(summary: list[RatioSummary]) -> float | None:
    """Ratio with the highest mean accuracy; ties go to the smaller ratio."""
    best = None
    for row in summary:
        if best is None or row.mean > best.mean:
            best = row
    return None if best is None else best.ratio
