"""Pruning plans and the score -> prune -> retrain pipeline."""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialrefine.dataset import (
    Dataset,
    SyntheticSpec,
    Trial,
    ems_standardize_dataset,
    generate_synthetic,
    inject_label_noise,
    round_half_up,
    split_loso,
    take_indices,
)
from trialrefine.errors import ConfigError
from trialrefine.influence import InfluenceConfig, ScoreVector
from trialrefine.model import ModelSpec
from trialrefine.refine import (
    CellResult,
    PipelineConfig,
    RefinementPlan,
    best_ratio,
    grid_search,
    plan_recovery,
    random_dropout,
    refine_dataset,
    run_fold,
    summarize,
)
from trialrefine.trainer import TrainConfig, evaluate, train


def scored(values):
    return ScoreVector(scores=values, metric_tag="influence")


def flat_dataset(n, subject=0):
    trials = [
        Trial(data=np.array([[float(i)]]), label=i % 2, subject_id=subject) for i in range(n)
    ]
    return Dataset(trials=trials, n_classes=2)


class TestRefineDataset:
    def test_removes_single_highest(self):
        d = flat_dataset(4)
        kept, plan = refine_dataset(d, scored([0.1, 0.9, 0.5, 0.3]), 0.25)
        assert plan.removed_indices == [1]
        assert plan.threshold == 0.9
        assert kept.n == 3
        assert [t.data[0, 0] for t in kept.trials] == [0.0, 2.0, 3.0]

    def test_zero_ratio_is_identity(self):
        d = flat_dataset(5)
        kept, plan = refine_dataset(d, scored([0.5] * 5), 0.0)
        assert plan.removed_indices == []
        assert plan.threshold == math.inf
        assert kept.trials == d.trials

    def test_ties_remove_lower_indices_first(self):
        d = flat_dataset(4)
        kept, plan = refine_dataset(d, scored([2.0, 2.0, 2.0, 2.0]), 0.5)
        assert plan.removed_indices == [0, 1]
        assert [t.data[0, 0] for t in kept.trials] == [2.0, 3.0]

    def test_count_uses_half_up_rounding(self):
        d = flat_dataset(10)
        _, plan = refine_dataset(d, scored(list(range(10))), 0.25)
        assert len(plan.removed_indices) == 3  # round(2.5) rounds up

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            refine_dataset(flat_dataset(3), scored([1.0, 2.0]), 0.1)

    @pytest.mark.parametrize("ratio", [-0.1, 1.0, 1.5])
    def test_ratio_out_of_range(self, ratio):
        with pytest.raises(ValueError):
            refine_dataset(flat_dataset(3), scored([1.0, 2.0, 3.0]), ratio)

    def test_noise_mask_sliced_with_kept(self):
        d = flat_dataset(4)
        d = Dataset(trials=d.trials, n_classes=2, noise_mask=np.array([True, False, True, False]))
        kept, _ = refine_dataset(d, scored([9.0, 0.0, 8.0, 0.0]), 0.5)
        np.testing.assert_array_equal(kept.noise_mask, [False, False])

    @given(
        scores=st.lists(
            st.floats(min_value=-1e6, max_value=1e6, allow_nan=False), min_size=1, max_size=40
        ),
        ratio=st.floats(min_value=0.0, max_value=0.999),
    )
    @settings(max_examples=150, deadline=None)
    def test_plan_invariants(self, scores, ratio):
        n = len(scores)
        d = flat_dataset(n)
        kept, plan = refine_dataset(d, scored(scores), ratio)
        s = np.asarray(scores)
        removed = plan.removed_indices
        assert len(removed) == round_half_up(ratio * n)
        assert kept.n + len(removed) == n
        kept_idx = sorted(set(range(n)) - set(removed))
        assert [t.data[0, 0] for t in kept.trials] == [float(i) for i in kept_idx]
        if removed and kept_idx:
            assert s[removed].min() >= s[kept_idx].max()


class TestRandomDropout:
    def test_zero_ratio_identity(self):
        d = flat_dataset(6)
        kept, plan = random_dropout(d, 0.0, seed=3)
        assert kept.trials == d.trials
        assert plan.removed_indices == []
        assert math.isnan(plan.threshold)
        assert plan.metric_tag == "random"

    def test_same_seed_same_removal(self):
        d = flat_dataset(12)
        _, a = random_dropout(d, 0.5, seed=7)
        _, b = random_dropout(d, 0.5, seed=7)
        assert a.removed_indices == b.removed_indices

    def test_seed_changes_removal(self):
        d = flat_dataset(12)
        sets = {tuple(random_dropout(d, 0.5, seed=s)[1].removed_indices) for s in range(6)}
        assert len(sets) > 1

    def test_each_index_removed_at_uniform_rate(self):
        d = flat_dataset(10)
        counts = np.zeros(10)
        n_seeds = 2000
        for s in range(n_seeds):
            counts[random_dropout(d, 0.3, seed=s)[1].removed_indices] += 1
        freq = counts / n_seeds
        assert np.all(np.abs(freq - 0.3) <= 0.05)

    def test_ratio_out_of_range(self):
        with pytest.raises(ValueError):
            random_dropout(flat_dataset(3), 1.0, seed=0)


class TestPlanRecovery:
    def plan(self, removed):
        return RefinementPlan(ratio=0.5, threshold=1.0, removed_indices=removed, metric_tag="influence")

    def test_partial_overlap(self):
        mask = np.array([True, False, True, False])
        precision, recall = plan_recovery(self.plan([0, 1]), mask)
        assert precision == 0.5
        assert recall == 0.5

    def test_perfect_recovery(self):
        mask = np.array([True, True, False, False])
        assert plan_recovery(self.plan([0, 1]), mask) == (1.0, 1.0)

    def test_undefined_cases_are_nan(self):
        mask = np.array([True, False])
        assert all(math.isnan(v) for v in plan_recovery(self.plan([0]), None))
        empty = RefinementPlan(ratio=0.0, threshold=math.inf, removed_indices=[], metric_tag="influence")
        assert all(math.isnan(v) for v in plan_recovery(empty, mask))
        assert all(math.isnan(v) for v in plan_recovery(self.plan([0]), np.zeros(2, dtype=bool)))


class TestPipelineConfig:
    def base(self, **kw):
        spec = ModelSpec("linear-softmax", input_dim=4, n_classes=2)
        return PipelineConfig(model=spec, train=TrainConfig(), **kw)

    def test_defaults(self):
        cfg = self.base()
        assert cfg.metric == "influence"
        assert cfg.influence.mode == "self"
        assert cfg.ratios == (0.0, 0.1, 0.2, 0.3, 0.4)
        assert cfg.seeds == tuple(range(10))

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            self.base(metric="entropy")
        with pytest.raises(ConfigError):
            self.base(ratios=(0.0, 1.0))
        with pytest.raises(ConfigError):
            self.base(ratios=(0.1, 0.1))
        with pytest.raises(ConfigError):
            self.base(seeds=())


def pipeline_dataset():
    d = generate_synthetic(
        SyntheticSpec(
            n_subjects=3,
            trials_per_subject=8,
            n_channels=2,
            n_timepoints=8,
            n_classes=2,
            class_separation=2.0,
            seed=4,
        )
    )
    return ems_standardize_dataset(inject_label_noise(d, 0.2, seed=1))


def pipeline_config(**kw):
    spec = ModelSpec("linear-softmax", input_dim=16, n_classes=2, weight_decay=1e-3)
    tc = TrainConfig(lr_peak=5e-2, epochs=60, warmup_epochs=5, batch_size=16, weight_decay=1e-3)
    defaults = dict(model=spec, train=tc, ratios=(0.0, 0.25), seeds=(0, 1))
    defaults.update(kw)
    return PipelineConfig(**defaults)


class TestRunFold:
    def test_zero_ratio_matches_plain_training(self):
        d = pipeline_dataset()
        train_d, test_d = split_loso(d, 0)
        cfg = pipeline_config()
        out = run_fold(train_d, test_d, cfg, 0.0, seed=1)
        baseline = train(cfg.model, train_d, replace(cfg.train, seed=1))
        assert out.accuracy == evaluate(cfg.model, baseline.theta, test_d)
        assert out.plan is None
        assert out.n_removed == 0

    def test_repeat_run_identical(self):
        d = pipeline_dataset()
        train_d, test_d = split_loso(d, 1)
        cfg = pipeline_config()
        a = run_fold(train_d, test_d, cfg, 0.25, seed=0)
        b = run_fold(train_d, test_d, cfg, 0.25, seed=0)
        assert a.accuracy == b.accuracy
        assert a.plan.removed_indices == b.plan.removed_indices

    def test_pruning_to_empty_rejected(self):
        d = pipeline_dataset()
        train_d, test_d = split_loso(d, 0)
        tiny = take_indices(train_d, [0, 1])
        with pytest.raises(ValueError):
            run_fold(tiny, test_d, pipeline_config(), 0.75, seed=0)

    def test_empty_training_split_rejected(self):
        d = pipeline_dataset()
        train_d, test_d = split_loso(d, 0)
        with pytest.raises(ValueError):
            run_fold(take_indices(train_d, []), test_d, pipeline_config(), 0.0, seed=0)

    def test_flipped_labels_recovered_by_self_influence(self):
        # 24 two-feature blobs per side, labels flipped at two known
        # indices. The convex run reaches gradient norm 1e-8, where
        # self-influence ranks both flips in the removal set at rho=0.2.
        def blobs(n, seed, subject, flip=()):
            rng = np.random.default_rng(seed)
            X = np.concatenate(
                [rng.normal([-1.5, 0], 0.5, (n // 2, 2)), rng.normal([1.5, 0], 0.5, (n // 2, 2))]
            )
            y = np.array([0] * (n // 2) + [1] * (n // 2))
            mask = np.zeros(n, dtype=bool)
            y[list(flip)] = 1 - y[list(flip)]
            mask[list(flip)] = True
            trials = [Trial(data=x[None], label=int(l), subject_id=subject) for x, l in zip(X, y)]
            return Dataset(trials=trials, n_classes=2, noise_mask=mask)

        train_d = blobs(24, 12, 0, flip=[2, 17])
        test_d = blobs(24, 99, 1)
        spec = ModelSpec("linear-softmax", input_dim=2, n_classes=2, weight_decay=1e-2)
        tc = TrainConfig(
            lr_peak=1.0,
            epochs=30000,
            warmup_epochs=0,
            batch_size=24,
            weight_decay=1e-2,
            seed=0,
            grad_tol=1e-8,
            optimizer="gd",
            schedule="constant",
        )
        cfg = PipelineConfig(
            model=spec,
            train=tc,
            metric="influence",
            influence=InfluenceConfig(damping=1e-3, mode="self"),
            ratios=(0.0, 0.2),
            seeds=(0,),
        )
        out = run_fold(train_d, test_d, cfg, 0.2, seed=0)
        assert out.recall >= 0.7
        assert {2, 17} <= set(out.plan.removed_indices)


class TestGridSearch:
    def test_single_subject_rejected(self):
        d = pipeline_dataset()
        only = take_indices(d, [i for i, t in enumerate(d.trials) if t.subject_id == 0])
        with pytest.raises(ValueError):
            grid_search(pipeline_config(), only)

    def test_bad_thread_count_rejected(self):
        with pytest.raises(ValueError):
            grid_search(pipeline_config(), pipeline_dataset(), threads=0)

    def test_degenerate_grid_is_loso_baseline(self):
        d = pipeline_dataset()
        cfg = pipeline_config(ratios=(0.0,), seeds=(0,))
        result = grid_search(cfg, d)
        assert len(result.cells) == 3
        assert result.best_ratio == 0.0
        dp = ems_standardize_dataset(d, cfg.ems)
        for cell in result.cells:
            train_d, test_d = split_loso(dp, cell.fold)
            rep = train(cfg.model, train_d, replace(cfg.train, seed=0))
            assert cell.accuracy == evaluate(cfg.model, rep.theta, test_d)

    def test_cells_sorted_and_complete(self):
        result = grid_search(pipeline_config(), pipeline_dataset())
        keys = [(c.fold, c.ratio, c.seed) for c in result.cells]
        assert keys == sorted(keys)
        assert len(keys) == 3 * 2 * 2
        assert len(set(keys)) == len(keys)

    def test_summary_recomputes_from_cells(self):
        result = grid_search(pipeline_config(), pipeline_dataset())
        for row in result.summary:
            acc = np.array([c.accuracy for c in result.cells if c.ratio == row.ratio])
            assert abs(row.mean - acc.mean()) <= 1e-12
            assert abs(row.std - acc.std()) <= 1e-12

    def test_thread_count_does_not_change_results(self):
        cfg = pipeline_config()
        d = pipeline_dataset()
        assert grid_search(cfg, d, threads=1) == grid_search(cfg, d, threads=3)

    def test_random_metric_grid(self):
        result = grid_search(pipeline_config(metric="random"), pipeline_dataset())
        removed = [c.n_removed for c in result.cells if c.ratio == 0.25]
        assert all(r == 4 for r in removed)  # round(0.25 * 16)


class TestSummaries:
    def cells(self, accs, ratio=0.1):
        return [
            CellResult(fold=0, ratio=ratio, seed=i, accuracy=a, n_removed=0, recall=0.0, precision=0.0)
            for i, a in enumerate(accs)
        ]

    def test_population_std(self):
        [row] = summarize(self.cells([0.5, 1.0]))
        assert row.mean == 0.75
        assert row.std == 0.25

    def test_best_ratio_ties_go_low(self):
        summary = summarize(self.cells([0.8], ratio=0.3) + self.cells([0.8], ratio=0.1))
        assert best_ratio(summary) == 0.1
        assert best_ratio([]) is None
