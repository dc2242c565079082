"""Influence-score and MC-dropout training-set refinement for small
multi-channel time-series classifiers: train, score, prune, retrain."""

__version__ = "0.1.0"

from .dataset import (
    Dataset,
    EmsConfig,
    SyntheticSpec,
    Trial,
    ems_standardize,
    ems_standardize_dataset,
    generate_synthetic,
    inject_label_noise,
    load_dataset,
    save_dataset,
    split_loso,
    take_indices,
)
from .errors import (
    CapacityError,
    ConfigError,
    ConvergenceError,
    DataFormatError,
    DataValidationError,
    NonFiniteGradientError,
    TrialRefineError,
    UnsupportedArchitectureError,
)
from .influence import InfluenceConfig, ScoreVector, influence_scores, save_scores, solve_hinv_v
from .model import ModelSpec, forward, init_params, load_params, save_params
from .refine import (
    ExperimentResult,
    PipelineConfig,
    RefinementPlan,
    grid_search,
    random_dropout,
    refine_dataset,
    run_fold,
)
from .trainer import TrainConfig, TrainReport, evaluate, train
from .uncertainty import McConfig, mc_dropout_scores

__all__ = [
    "__version__",
    "Dataset",
    "EmsConfig",
    "SyntheticSpec",
    "Trial",
    "ems_standardize",
    "ems_standardize_dataset",
    "generate_synthetic",
    "inject_label_noise",
    "load_dataset",
    "save_dataset",
    "split_loso",
    "take_indices",
    "CapacityError",
    "ConfigError",
    "ConvergenceError",
    "DataFormatError",
    "DataValidationError",
    "NonFiniteGradientError",
    "TrialRefineError",
    "UnsupportedArchitectureError",
    "InfluenceConfig",
    "ScoreVector",
    "influence_scores",
    "save_scores",
    "solve_hinv_v",
    "ModelSpec",
    "forward",
    "init_params",
    "load_params",
    "save_params",
    "ExperimentResult",
    "PipelineConfig",
    "RefinementPlan",
    "grid_search",
    "random_dropout",
    "refine_dataset",
    "run_fold",
    "TrainConfig",
    "TrainReport",
    "evaluate",
    "train",
    "McConfig",
    "mc_dropout_scores",
]
