"""Synthetic validation harness on a known Gaussian-mixture classification problem."""

from .analysis import (
    STRATEGIES,
    BoundParams,
    acc_fm_metrics,
    bound_constants,
    conditional_mse,
    local_variance,
    local_variance_from_probs,
    make_strategy,
    overall_variance_bound,
    per_trial_mse,
    variance_bound,
)
from .harness import ValexConfig, ValexReport, binned_quartiles, run_valex, write_report
from .mixture import MixtureSpec, bayes_optimal, sample_mixture, true_density, true_log_density
from .mlp import MlpModel, TrainConfig, loss_and_grad, lr_at, train_mlp
from .partition import RegionPartition, region_counts, region_index, region_probabilities, region_probability

__all__ = [
    "STRATEGIES", "BoundParams", "MixtureSpec", "MlpModel", "RegionPartition", "TrainConfig",
    "ValexConfig", "ValexReport", "acc_fm_metrics", "bayes_optimal", "binned_quartiles",
    "bound_constants", "conditional_mse", "local_variance", "local_variance_from_probs",
    "loss_and_grad", "lr_at", "make_strategy", "overall_variance_bound", "per_trial_mse",
    "region_counts", "region_index", "region_probabilities", "region_probability", "run_valex",
    "sample_mixture", "train_mlp", "true_density", "true_log_density", "variance_bound", "write_report",
]
