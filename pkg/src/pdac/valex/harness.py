"""End-to-end synthetic validation runs: select a buffer, train, measure error and local variance."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .. import pgm
from ..coreset import weighted_sample_without_replacement
from ..errors import InputError
from . import analysis
from .mixture import MixtureSpec, bayes_optimal, sample_mixture, true_log_density
from .mlp import TrainConfig, train_mlp
from .partition import RegionPartition, region_counts, region_index, region_probabilities

logger = logging.getLogger(__name__)

MSE_COLUMNS = ("strategy", "N", "trial", "mse")
DENSITY_COLUMNS = ("strategy", "N", "trial", "mean_true_density")
REGION_COLUMNS = ("strategy", "N", "region", "p_i", "l_i", "variance")
BIN_COLUMNS = ("strategy", "N", "bin", "p_lo", "p_hi", "count", "min", "q1", "median", "q3", "max")


@dataclass
class ValexConfig:
    n_train: int = 100_000
    n_test: int = 100_000
    trials: int = 10
    N_list: tuple[int, ...] = (10, 100, 1000)
    strategies: tuple[str, ...] = ("uniform", "prop_p", "prop_inv_p", "model_proxy")
    side: float = 20.0
    m: float = 0.4
    epochs: int = 50
    warmup_epochs: int = 10
    lr: float = 0.1
    batch_size: int = 128
    hidden: int = 64
    n_bins: int = 5
    pgm_d: int = 5
    pgm_L: int = 3
    pgm_G: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.n_train < 1 or self.n_test < 1 or self.trials < 1:
            raise InputError("n_train, n_test and trials must be >= 1")
        if not self.N_list or any(N < 1 or N > self.n_train for N in self.N_list):
            raise InputError("every buffer size must lie in [1, n_train]")
        unknown = set(self.strategies) - set(analysis.STRATEGIES)
        if unknown or not self.strategies:
            raise InputError(f"unknown strategies {sorted(unknown)}")
        RegionPartition(self.side, self.m)
        self.train_config()

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr, self.warmup_epochs, self.batch_size, self.hidden)


@dataclass
class ValexReport:
    config: ValexConfig
    mse_rows: list[tuple] = field(default_factory=list)
    density_rows: list[tuple] = field(default_factory=list)
    region_rows: list[tuple] = field(default_factory=list)
    bin_rows: list[tuple] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def mse(self, strategy: str, N: int) -> np.ndarray:
        return np.array([r[3] for r in self.mse_rows if r[0] == strategy and r[1] == N])

    def mean_density(self, strategy: str, N: int) -> np.ndarray:
        return np.array([r[3] for r in self.density_rows if r[0] == strategy and r[1] == N])

    def regions(self, strategy: str, N: int) -> np.ndarray:
        """``(region, p_i, l_i, variance)`` rows as an array."""
        return np.array([r[2:] for r in self.region_rows if r[0] == strategy and r[1] == N], dtype=float)


def binned_quartiles(p: np.ndarray, values: np.ndarray, n_bins: int) -> list[tuple]:
    """Equal-width bins over the range of ``p`` (left-closed, last bin closed) with five-number summaries."""
    if p.size == 0:
        return []
    lo, hi = float(p.min()), float(p.max())
    edges = np.linspace(lo, hi, n_bins + 1)
    which = np.clip(np.searchsorted(edges, p, side="right") - 1, 0, n_bins - 1)
    rows = []
    for b in range(n_bins):
        v = values[which == b]
        if v.size:
            q = np.percentile(v, [0, 25, 50, 75, 100])
        else:
            q = [np.nan] * 5
        rows.append((b, float(edges[b]), float(edges[b + 1]), int(v.size), *map(float, q)))
    return rows


def _selection_weights(kind, n, train_log_p, registry, X, y):
    if kind == "uniform":
        return analysis.make_strategy("uniform", n=n)
    if kind in ("prop_p", "prop_inv_p"):
        return analysis.make_strategy(kind, log_densities=train_log_p)
    return analysis.make_strategy("model_proxy", registry=registry, features=X, labels=y)


def fit_proxy_registry(config: ValexConfig, X: np.ndarray, y: np.ndarray) -> pgm.PGMRegistry:
    """Projected mixture fitted on the training set; ``d`` is capped at the input dimension."""
    d = min(config.pgm_d, X.shape[1])
    if d < config.pgm_d:
        logger.info("projection dimension %d exceeds input dimension; using d=%d", config.pgm_d, d)
    rng = np.random.default_rng([config.seed, 1])
    return pgm.fit_registry(X, y, d=d, L=config.pgm_L, G=config.pgm_G, rng=rng)


def run_valex(config: ValexConfig) -> ValexReport:
    """Run every (N, strategy) cell for ``config.trials`` trials on one fixed train/test draw."""
    config.validate()
    spec = MixtureSpec.default()
    part = RegionPartition(config.side, config.m)
    data_rng = np.random.default_rng([config.seed, 0])
    X_train, y_train = sample_mixture(spec, config.n_train, data_rng)
    X_test, _ = sample_mixture(spec, config.n_test, data_rng)

    train_log_p = true_log_density(spec, X_train, y_train)
    train_p = np.exp(train_log_p)
    target = bayes_optimal(spec, X_test)
    train_regions = region_index(part, X_train)
    test_regions = region_index(part, X_test)
    l_counts = region_counts(train_regions, part.n_regions)
    examined = np.intersect1d(np.unique(train_regions), np.unique(test_regions))
    in_examined = np.isin(test_regions, examined)

    registry = fit_proxy_registry(config, X_train, y_train) if "model_proxy" in config.strategies else None
    tcfg = config.train_config()
    report = ValexReport(config)
    summary_cells = []

    for N in config.N_list:
        for s_idx, kind in enumerate(config.strategies):
            weights = _selection_weights(kind, config.n_train, train_log_p, registry, X_train, y_train)
            probs = np.empty((config.trials, config.n_test, spec.K))
            for trial in range(config.trials):
                sel_rng = np.random.default_rng([config.seed, 3, trial, N, s_idx])
                chosen = np.array(weighted_sample_without_replacement(weights, N, sel_rng))
                model = train_mlp(
                    X_train[chosen], y_train[chosen], spec.K, tcfg,
                    rng=np.random.default_rng([config.seed, 4, trial, N, s_idx]),
                    init_rng=np.random.default_rng([config.seed, 2, trial]),
                )
                probs[trial] = model.predict_proba(X_test)
                report.density_rows.append((kind, N, trial, float(train_p[chosen].mean())))
            mses = analysis.per_trial_mse(probs, target)
            report.mse_rows.extend((kind, N, t, float(v)) for t, v in enumerate(mses))

            p_all = region_probabilities(weights.probabilities, train_regions, part.n_regions)
            if config.trials >= 2:
                var = analysis.local_variance_from_probs(probs[:, in_examined], test_regions[in_examined])
            else:
                var = {}
            p_ex = p_all[examined]
            v_ex = np.array([var.get(int(r), np.nan) for r in examined])
            report.region_rows.extend(
                (kind, N, int(r), float(p), int(l_counts[r]), float(v)) for r, p, v in zip(examined, p_ex, v_ex)
            )
            if config.trials >= 2:
                report.bin_rows.extend((kind, N, *row) for row in binned_quartiles(p_ex, v_ex, config.n_bins))
                rho, pval = stats.spearmanr(p_ex, v_ex)
            else:
                rho = pval = float("nan")
            dens = report.mean_density(kind, N)
            summary_cells.append({
                "strategy": kind,
                "N": N,
                "mse_mean": float(mses.mean()),
                "mse_sem": float(mses.std(ddof=1) / np.sqrt(len(mses))) if len(mses) > 1 else float("nan"),
                "mean_true_density": float(dens.mean()),
                "spearman_rho": float(rho),
                "spearman_p": float(pval),
            })
            logger.info("N=%d %-11s mse=%.5f", N, kind, mses.mean())

    report.summary = {
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()},
        "examined_regions": int(examined.size),
        "n_regions": part.n_regions,
        "proxy_projection_dim": min(config.pgm_d, spec.dim),
        "cells": summary_cells,
    }
    return report


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_report(report: ValexReport, out_dir) -> dict[str, Path]:
    """Write the four tables as CSV and the summary as JSON into ``out_dir``."""
    from ..dataio import dump_json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "mse": out / "mse.csv",
        "density": out / "density.csv",
        "regions": out / "regions.csv",
        "bins": out / "bins.csv",
        "summary": out / "summary.json",
    }
    _write_csv(paths["mse"], MSE_COLUMNS, report.mse_rows)
    _write_csv(paths["density"], DENSITY_COLUMNS, report.density_rows)
    _write_csv(paths["regions"], REGION_COLUMNS, report.region_rows)
    _write_csv(paths["bins"], BIN_COLUMNS, report.bin_rows)
    paths["summary"].write_text(dump_json(report.summary), encoding="utf-8")
    return paths
