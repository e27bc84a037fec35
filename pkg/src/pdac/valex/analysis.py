"""Error measures, local variance, the per-region variance bound and selection strategies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import pgm
from ..coreset import SelectionWeights, density_weights
from ..errors import InputError

STRATEGIES = ("uniform", "prop_p", "prop_inv_p", "model_proxy")


# ---------------------------------------------------------------------------
# conditional MSE and local variance
# ---------------------------------------------------------------------------


def _stack_probs(models, X) -> np.ndarray:
    return np.stack([m.predict_proba(X) for m in models])


def per_trial_mse(probs: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Mean squared distance to ``target`` for each trial; ``probs`` has shape ``(trials, n, K)``."""
    return np.mean(np.sum((probs - target[None]) ** 2, axis=2), axis=1)


def conditional_mse(models, X_test, spec) -> float:
    """Monte-Carlo estimate of ``E_x E_M ||softmax(f(x)) - f*(x)||^2`` over models (trials) and test points."""
    from .mixture import bayes_optimal

    if len(models) == 0:
        raise InputError("need at least one model")
    target = bayes_optimal(spec, X_test)
    return float(np.mean(per_trial_mse(_stack_probs(models, X_test), target)))


def local_variance_from_probs(probs: np.ndarray, regions) -> dict[int, float]:
    """Per-region mean over points of the trace of the across-trial sample covariance."""
    if probs.shape[0] < 2:
        raise InputError("local variance needs at least two trials")
    # shifting by one trial leaves the covariance unchanged and makes identical trials exactly 0
    trace_cov = np.sum(np.var(probs - probs[:1], axis=0, ddof=1), axis=1)
    regions = np.asarray(regions)
    uniq, inverse = np.unique(regions, return_inverse=True)
    sums = np.bincount(inverse, weights=trace_cov)
    counts = np.bincount(inverse)
    return {int(r): float(s / c) for r, s, c in zip(uniq, sums, counts)}


def local_variance(models, X_test, part) -> dict[int, float]:
    from .partition import region_index

    if len(models) < 2:
        raise InputError("local variance needs at least two models")
    return local_variance_from_probs(_stack_probs(models, X_test), region_index(part, np.atleast_2d(X_test)))


# ---------------------------------------------------------------------------
# variance bound
# ---------------------------------------------------------------------------


@dataclass
class BoundParams:
    """Constants of the per-region variance bound plus region mass ``p`` and count ``l``.

    ``p`` and ``l`` may be scalars or equal-length arrays (one entry per region).
    ``l == 0`` marks an empty region.
    """

    C0: float = 1.0
    C1: float = 1.0
    C2: float = 1.0
    gamma: float = 0.0
    N: int = 1
    p: float | np.ndarray = 0.0
    l: float | np.ndarray = 1

    def validate(self) -> None:
        p = np.asarray(self.p, dtype=float)
        l = np.asarray(self.l, dtype=float)
        if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise InputError("region probabilities must lie in [0, 1]")
        if np.any(l < 0) or np.any((l > 0) & (l < 1)):
            raise InputError("region counts must be 0 (empty) or >= 1")
        if np.any((l == 0) & (p > 0)):
            raise InputError("an empty region cannot carry resampling mass")
        if self.N < 1:
            raise InputError("buffer size N must be >= 1")
        if min(self.C0, self.C1, self.C2, self.gamma) < 0:
            raise InputError("bound constants must be non-negative")


def bound_constants(u0: float, u: float, phi_m: float, gamma: float) -> tuple[float, float, float]:
    """``(C0, C1, C2)`` from the stability floor ``u0``, ceiling ``u``, ``phi(m)`` and ``gamma``."""
    C0 = (u0 + 2.0 * gamma) * u0
    C1 = 2.0 * (u + 2.0 * gamma) * u - C0
    C2 = (phi_m + 2.0 * gamma) * phi_m - C0
    return C0, C1, C2


def _region_terms(params: BoundParams) -> np.ndarray:
    """Bracketed per-region term of the bound (without the indicator and ``4 gamma^2``)."""
    p = np.atleast_1d(np.asarray(params.p, dtype=float))
    l = np.atleast_1d(np.asarray(params.l, dtype=float))
    p, l = np.broadcast_arrays(p, l)
    N = float(params.N)
    q = np.divide(p, l, out=np.zeros_like(p), where=l > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_b = N * np.log1p(-p)  # log (1-p)^N, -inf at p == 1
        log_a = N * np.log1p(-q)  # log (1-p/l)^N
        b = np.exp(log_b)
        one_minus_b = -np.expm1(log_b)
        one_minus_a = -np.expm1(log_a)
        # a - b = a * (1 - b/a) with b <= a; no cancellation and no overflow
        finite_a = np.isfinite(log_a)
        ratio = np.where(finite_a, log_b - np.where(finite_a, log_a, 0.0), -np.inf)
        a_minus_b = np.exp(log_a) * -np.expm1(ratio)
    terms = one_minus_b * (params.C0 + b * params.C1) + 2.0 * l * params.C2 * a_minus_b * one_minus_a
    return np.where(l > 0, terms, 0.0)


def variance_bound(params: BoundParams):
    """Upper bound on the expected trace covariance inside one region (vectorized over regions)."""
    params.validate()
    out = _region_terms(params) + 4.0 * params.gamma ** 2
    return float(out[0]) if np.ndim(params.p) == 0 and np.ndim(params.l) == 0 else out


def overall_variance_bound(params: BoundParams, region_mass) -> float:
    """Region-mass-weighted sum of the per-region terms over nonempty regions, plus ``4 gamma^2``."""
    params.validate()
    mass = np.atleast_1d(np.asarray(region_mass, dtype=float))
    terms = _region_terms(params)
    if mass.shape != terms.shape:
        raise InputError("region_mass must match the number of regions")
    return float(np.sum(mass * terms) + 4.0 * params.gamma ** 2)


# ---------------------------------------------------------------------------
# selection strategies
# ---------------------------------------------------------------------------


def make_strategy(
    kind: str,
    *,
    n: int | None = None,
    densities=None,
    log_densities=None,
    registry: pgm.PGMRegistry | None = None,
    features=None,
    labels=None,
    ids=None,
) -> SelectionWeights:
    """Resampling weights for one of ``uniform``, ``prop_p``, ``prop_inv_p``, ``model_proxy``.

    ``prop_p`` and ``prop_inv_p`` take true densities (``densities`` or
    ``log_densities``); ``model_proxy`` scores ``features``/``labels`` with a
    fitted ``registry``. Zero-density points get zero weight under
    ``prop_inv_p``.
    """
    if kind == "uniform":
        if n is None:
            n = len(ids) if ids is not None else None
        if n is None or n < 1:
            raise InputError("uniform strategy needs n >= 1")
        return SelectionWeights(list(range(n)) if ids is None else list(ids), np.full(n, 1.0 / n))
    if kind in ("prop_p", "prop_inv_p"):
        if log_densities is None:
            if densities is None:
                raise InputError(f"{kind} needs true densities")
            with np.errstate(divide="ignore"):
                log_densities = np.log(np.asarray(densities, dtype=float))
        logs = np.asarray(log_densities, dtype=float)
        if kind == "prop_p":
            return density_weights(logs, ids=ids)
        inv = np.where(np.isneginf(logs), -np.inf, -logs)
        if np.all(np.isneginf(inv)):
            raise InputError("prop_inv_p needs at least one positive density")
        return density_weights(inv, ids=ids)
    if kind == "model_proxy":
        if registry is None or features is None or labels is None:
            raise InputError("model_proxy needs a fitted registry, features and labels")
        return density_weights(pgm.joint_log_density(registry, features, labels), ids=ids)
    raise InputError(f"unknown strategy {kind!r}; expected one of {STRATEGIES}")


# ---------------------------------------------------------------------------
# continual-learning metrics
# ---------------------------------------------------------------------------


def acc_fm_metrics(A) -> tuple[float, float]:
    """Final average accuracy and forgetting measure.

    ``A[i, j]`` is the accuracy on task ``j`` after training through task
    ``i`` (0-based, only ``j <= i`` is read). Forgetting averages, over all
    but the last task, the largest drop from an earlier accuracy to the
    final one.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError("accuracy matrix must be square")
    T = A.shape[0]
    if T < 2:
        raise InputError("forgetting is undefined for fewer than two tasks")
    acc = float(np.mean(A[T - 1, :]))
    drops = [max(A[j, i] - A[T - 1, i] for j in range(i, T - 1)) for i in range(T - 1)]
    return acc, float(np.mean(drops))
