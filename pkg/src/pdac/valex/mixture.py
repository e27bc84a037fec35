"""Ground-truth Gaussian mixture classification problem and its Bayes-optimal posterior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ..errors import InputError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class MixtureSpec:
    """One Gaussian per class: ``x | y=k ~ N(means[k], covariances[k])``, ``y ~ priors``."""

    means: np.ndarray
    covariances: np.ndarray
    priors: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(
            self.means.shape[0], self.means.shape[1], self.means.shape[1]
        )
        self.priors = np.asarray(self.priors, dtype=float)
        if self.priors.shape != (self.means.shape[0],):
            raise InputError("one prior per component is required")
        if np.any(self.priors < 0) or abs(self.priors.sum() - 1.0) > 1e-9:
            raise InputError("priors must be non-negative and sum to 1")
        self._chol = np.linalg.cholesky(self.covariances)

    @property
    def K(self) -> int:
        return int(self.means.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @classmethod
    def default(cls, K: int = 10, radius: float = 3.0, variance: float = 2.0) -> "MixtureSpec":
        """K means evenly spaced on a circle, shared covariance ``variance * I``, uniform priors."""
        theta = 2.0 * np.pi * np.arange(K) / K
        means = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
        covs = np.repeat(variance * np.eye(2)[None], K, axis=0)
        return cls(means, covs, np.full(K, 1.0 / K))

    def class_log_densities(self, x) -> np.ndarray:
        """``log p(x | y=k)`` for every row of ``x`` and every class, shape ``(n, K)``."""
        X = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty((X.shape[0], self.K))
        for k in range(self.K):
            L = self._chol[k]
            z = np.linalg.solve(L, (X - self.means[k]).T)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            out[:, k] = -0.5 * (self.dim * LOG_2PI + logdet + np.sum(z * z, axis=0))
        return out


def sample_mixture(spec: MixtureSpec, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` labelled points: a label from the priors, then x from that class's Gaussian."""
    if n < 1:
        raise InputError("n must be >= 1")
    y = rng.choice(spec.K, size=n, p=spec.priors)
    z = rng.standard_normal((n, spec.dim))
    x = spec.means[y] + np.einsum("nij,nj->ni", spec._chol[y], z)
    return x, y


def true_log_density(spec: MixtureSpec, x, y) -> np.ndarray:
    """``log p(x, y) = log p(x | y) + log p(y)``."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    labels = np.atleast_1d(np.asarray(y))
    with np.errstate(divide="ignore"):
        return spec.class_log_densities(X)[np.arange(X.shape[0]), labels] + np.log(spec.priors[labels])


def true_density(spec: MixtureSpec, x, y) -> np.ndarray:
    return np.exp(true_log_density(spec, x, y))


def bayes_optimal(spec: MixtureSpec, x) -> np.ndarray:
    """Posterior class probabilities ``p(k | x)``, rows summing to one."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    with np.errstate(divide="ignore"):
        logits = spec.class_log_densities(X) + np.log(spec.priors)
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
