"""Projected Gaussian mixture (PGM) density estimation.

Each class keeps running feature statistics, a variance-maximizing
projection onto the top-``d`` eigenvectors of its centered feature
covariance, and an ``L``-component Gaussian mixture fitted by EM in the
projected space. The joint score of a labelled sample is

    p(z) = p(xi | y) * n_y / n

with ``xi`` the projected feature. All density arithmetic is done in
log-space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import DegenerateCovarianceError, InputError, InsufficientDataError, StateError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
COLLAPSE_THRESHOLD = 1e-12
RIDGE_SCALE = 1e-6
RIDGE_FLOOR = 1e-10
EARLY_STOP_TOL = 1e-4
# eigenvalues below this fraction of the trace count as zero variance
RANK_TOL = 1e-10


@dataclass
class ClassStats:
    """Running count, mean and centered covariance of one class's raw features."""

    count: int
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> "ClassStats":
        return cls(0, np.zeros(dim), np.zeros((dim, dim)))

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


@dataclass
class ProjectionMatrix:
    """Orthonormal ``D x d`` basis ``W`` and the center ``h_bar`` it is applied around."""

    W: np.ndarray
    center: np.ndarray

    @property
    def dim_in(self) -> int:
        return int(self.W.shape[0])

    @property
    def dim_out(self) -> int:
        return int(self.W.shape[1])


@dataclass
class GaussianComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class ClassPGM:
    """Density model of a single class.

    ``n_components`` is the requested ``L``; ``len(components)`` can be smaller
    when the class had fewer samples than ``L`` at initialization. Before
    initialization raw features wait in ``staging_pool``.
    """

    stats: ClassStats
    d: int = 10
    n_components: int = 7
    projection: ProjectionMatrix | None = None
    components: list[GaussianComponent] = field(default_factory=list)
    initialized: bool = False
    staging_pool: list[np.ndarray] = field(default_factory=list)

    @property
    def count(self) -> int:
        return self.stats.count + len(self.staging_pool)


@dataclass
class PGMRegistry:
    """Class label -> :class:`ClassPGM`, plus the number of samples seen overall."""

    d: int = 10
    n_components: int = 7
    models: dict[int, ClassPGM] = field(default_factory=dict)
    total_count: int = 0

    @property
    def dim(self) -> int | None:
        for model in self.models.values():
            return model.stats.dim
        return None

    def prior(self, label: int) -> float:
        """Empirical class frequency ``n_y / n``."""
        if label not in self.models or self.total_count == 0:
            raise StateError(f"class {label!r} has not been observed")
        return self.models[label].count / self.total_count

    def is_ready(self, label: int) -> bool:
        model = self.models.get(label)
        return model is not None and model.initialized


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _as_matrix(x, dim: int | None = None, name: str = "features") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.size else arr.reshape(0, dim or 0)
    if arr.ndim != 2:
        raise InputError(f"{name} must be a vector or a 2-D array, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise InputError(f"{name} have dimension {arr.shape[1]}, expected {dim}")
    return arr


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError("covariance is not positive definite") from exc


def regularize_covariance(cov: np.ndarray) -> np.ndarray:
    """Symmetrize and add a ridge of ``1e-6 * trace / d`` (at least ``1e-10``) to the diagonal."""
    cov = 0.5 * (cov + cov.T)
    d = cov.shape[0]
    ridge = max(RIDGE_SCALE * float(np.trace(cov)) / d, RIDGE_FLOOR)
    return cov + ridge * np.eye(d)


# ---------------------------------------------------------------------------
# statistics and projection
# ---------------------------------------------------------------------------


def update_class_stats(stats: ClassStats, features, exact: bool = False) -> ClassStats:
    """Fold a batch of raw features into the running class statistics.

    The default follows the incremental rule where the old covariance (centered
    at the old mean) is mixed with the batch scatter around the *new* mean. It
    is exact on the first batch but otherwise misses the mean-shift term
    ``n_old * (m_old - m)(m_old - m)^T``; ``exact=True`` adds it back, giving
    the pooled covariance of all data seen.
    """
    X = _as_matrix(features, stats.dim)
    b = X.shape[0]
    if b == 0:
        return ClassStats(stats.count, stats.mean.copy(), stats.cov.copy())
    n_old = stats.count
    n = n_old + b
    mean = (stats.mean * n_old + X.sum(axis=0)) / n
    diff = X - mean
    scatter = diff.T @ diff
    if exact and n_old:
        shift = stats.mean - mean
        scatter = scatter + n_old * np.outer(shift, shift)
    cov = (stats.cov * n_old + scatter) / n
    return ClassStats(n, mean, 0.5 * (cov + cov.T))


def _complete_basis(W: np.ndarray, d: int) -> np.ndarray:
    """Extend orthonormal columns to ``d`` columns with Gram-Schmidt over the standard basis."""
    D = W.shape[0]
    cols = [W[:, j] for j in range(W.shape[1])]
    for i in range(D):
        if len(cols) == d:
            break
        v = np.zeros(D)
        v[i] = 1.0
        for _ in range(2):
            for c in cols:
                v = v - (c @ v) * c
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            cols.append(v / norm)
    return np.column_stack(cols) if cols else np.zeros((D, 0))


def _normalize_signs(W: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(W), axis=0)
    signs = np.sign(W[idx, np.arange(W.shape[1])])
    signs[signs == 0] = 1.0
    return W * signs


def compute_vmp(stats: ClassStats, d: int) -> ProjectionMatrix:
    """Variance-maximizing projection: the top-``d`` eigenvectors of the class covariance.

    Columns are ordered by descending eigenvalue and sign-normalized so the
    largest-magnitude entry is positive. Directions without variance are
    replaced by a deterministic Gram-Schmidt completion.
    """
    D = stats.dim
    if not 1 <= d <= D:
        raise InputError(f"projection dimension d={d} must lie in [1, {D}]")
    if stats.count < 1:
        raise InputError("cannot build a projection from empty statistics")
    cov = 0.5 * (stats.cov + stats.cov.T)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    trace = float(np.trace(cov))
    rank = int(np.sum(evals > RANK_TOL * trace)) if trace > 0 else 0
    keep = min(rank, d)
    W = evecs[:, :keep]
    if keep < d:
        W = _complete_basis(W, d)
    return ProjectionMatrix(_normalize_signs(W), stats.mean.copy())


def project(proj: ProjectionMatrix, h) -> np.ndarray:
    """Map raw features ``h`` (a vector or rows) to ``W^T (h - h_bar)``."""
    arr = np.asarray(h, dtype=float)
    if arr.shape[-1] != proj.dim_in:
        raise InputError(f"feature dimension {arr.shape[-1]} does not match projection input {proj.dim_in}")
    return (arr - proj.center) @ proj.W


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------


def gaussian_log_pdf(comp: GaussianComponent, xi) -> np.ndarray | float:
    """Log of ``N(xi | mu, Sigma)`` via Cholesky; ``xi`` may be a vector or rows."""
    x = np.asarray(xi, dtype=float)
    single = x.ndim == 1
    X = _as_matrix(x, comp.mean.shape[0], "points")
    chol = _cholesky(comp.cov)
    z = solve_triangular(chol, (X - comp.mean).T, lower=True, check_finite=False)
    maha = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (X.shape[1] * LOG_2PI + logdet + maha)
    return float(out[0]) if single else out


def _component_log_terms(components: list[GaussianComponent], X: np.ndarray) -> np.ndarray:
    """``log alpha_l + log N(x_i | mu_l, Sigma_l)`` as an ``(n, L)`` matrix."""
    cols = []
    with np.errstate(divide="ignore"):
        for comp in components:
            cols.append(np.log(comp.weight) + gaussian_log_pdf(comp, X))
    return np.column_stack(cols)


def _require_initialized(model: ClassPGM) -> None:
    if not model.initialized or not model.components:
        raise StateError("class density model is not initialized")


def mixture_log_density(model: ClassPGM, xi) -> np.ndarray | float:
    _require_initialized(model)
    x = np.asarray(xi, dtype=float)
    X = _as_matrix(x, model.components[0].mean.shape[0], "points")
    out = logsumexp(_component_log_terms(model.components, X), axis=1)
    return float(out[0]) if x.ndim == 1 else out


def mixture_density(model: ClassPGM, xi) -> np.ndarray | float:
    """``sum_l alpha_l N(xi | mu_l, Sigma_l)``, evaluated through log-sum-exp."""
    return np.exp(mixture_log_density(model, xi))


def mean_log_likelihood(model: ClassPGM, X) -> float:
    return float(np.mean(mixture_log_density(model, _as_matrix(X))))


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------


def _responsibilities(components, X):
    log_terms = _component_log_terms(components, X)
    log_norm = logsumexp(log_terms, axis=1, keepdims=True)
    return np.exp(log_terms - log_norm)


def _batch_moments(resp: np.ndarray, X: np.ndarray):
    """Responsibility-weighted totals, means and covariances (unregularized)."""
    nk = resp.sum(axis=0)
    means, covs = [], []
    for l in range(resp.shape[1]):
        if nk[l] < COLLAPSE_THRESHOLD:
            means.append(None)
            covs.append(None)
            continue
        r = resp[:, l]
        mu = (r @ X) / nk[l]
        diff = X - mu
        covs.append((diff * r[:, None]).T @ diff / nk[l])
        means.append(mu)
    return nk, means, covs


def _reseed_component(X: np.ndarray, L: int, rng) -> GaussianComponent:
    rng = rng if rng is not None else np.random.default_rng(0)
    point = X[int(rng.integers(X.shape[0]))].copy()
    return GaussianComponent(1.0 / L, point, np.eye(X.shape[1]))


def _finish(model: ClassPGM, comps: list[GaussianComponent]) -> ClassPGM:
    total = sum(c.weight for c in comps)
    for c in comps:
        c.weight = c.weight / total
    return replace(model, components=comps)


def em_step(model: ClassPGM, X, rng=None) -> ClassPGM:
    """One E-step and M-step on projected points ``X``; returns a new model.

    A component whose total responsibility falls below 1e-12 is reseeded at a
    random point of ``X`` with identity covariance and weight ``1/L``.
    """
    _require_initialized(model)
    X = _as_matrix(X, model.components[0].mean.shape[0], "points")
    n = X.shape[0]
    if n == 0:
        raise InputError("EM needs at least one point")
    L = len(model.components)
    resp = _responsibilities(model.components, X)
    nk, means, covs = _batch_moments(resp, X)
    comps = []
    for l in range(L):
        if means[l] is None:
            comps.append(_reseed_component(X, L, rng))
        else:
            comps.append(GaussianComponent(float(nk[l] / n), means[l], regularize_covariance(covs[l])))
    return _finish(model, comps)


def streaming_em_step(model: ClassPGM, X_batch, beta: float, rng=None) -> ClassPGM:
    """Streaming EM update on one batch of projected points.

    Weights are replaced by the batch responsibility averages; means and
    covariances move a fraction ``beta`` toward the batch M-step estimates.
    ``beta == 1`` reproduces :func:`em_step` exactly.
    """
    if not 0.0 < beta <= 1.0:
        raise InputError(f"beta must lie in (0, 1], got {beta}")
    _require_initialized(model)
    X = _as_matrix(X_batch, model.components[0].mean.shape[0], "points")
    n = X.shape[0]
    if n == 0:
        raise InputError("streaming EM needs a non-empty batch")
    L = len(model.components)
    resp = _responsibilities(model.components, X)
    nk, means, covs = _batch_moments(resp, X)
    comps = []
    for l, old in enumerate(model.components):
        if means[l] is None:
            comps.append(_reseed_component(X, L, rng))
            continue
        mu = (1.0 - beta) * old.mean + beta * means[l]
        cov = (1.0 - beta) * old.cov + beta * covs[l]
        comps.append(GaussianComponent(float(nk[l] / n), mu, regularize_covariance(cov)))
    return _finish(model, comps)


def fit_gmm(
    model: ClassPGM,
    X,
    G: int,
    rng,
    tol: float | None = EARLY_STOP_TOL,
    n_components: int | None = None,
    return_history: bool = False,
):
    """Initialize the mixture from random points of ``X`` and run up to ``G`` EM steps.

    Means start at ``L`` distinct points drawn with ``rng``, covariances at
    the identity and weights at ``1/L``. Iteration stops early once the
    relative change in mean log-likelihood drops below ``tol`` (``None``
    disables early stopping). With ``return_history`` the mean log-likelihood
    after initialization and after every step is returned as well.
    """
    X = _as_matrix(X, name="points")
    n, d = X.shape
    L = model.n_components if n_components is None else n_components
    if L < 1:
        raise InputError("need at least one mixture component")
    if n < L:
        raise InsufficientDataError(f"{n} points cannot seed {L} components")
    if G < 0:
        raise InputError("G must be non-negative")
    idx = rng.choice(n, size=L, replace=False)
    comps = [GaussianComponent(1.0 / L, X[i].copy(), np.eye(d)) for i in idx]
    model = replace(model, components=comps, initialized=True)
    history = [mean_log_likelihood(model, X)] if (return_history or tol is not None) else []
    for _ in range(G):
        model = em_step(model, X, rng)
        if not history:
            continue
        ll = mean_log_likelihood(model, X)
        prev = history[-1]
        history.append(ll)
        if tol is not None and abs(ll - prev) < tol * abs(prev):
            break
    if return_history:
        return model, history
    return model


# ---------------------------------------------------------------------------
# registry-level pipeline
# ---------------------------------------------------------------------------


def initialize_class(model: ClassPGM, features, G: int, rng, tol: float | None = EARLY_STOP_TOL) -> ClassPGM:
    """Statistics, projection and mixture fit from scratch on raw ``features``.

    Existing statistics in ``model`` are pooled exactly with the new batch.
    If there are fewer samples than requested components, ``L`` is reduced
    to the sample count for this class.
    """
    X = _as_matrix(features, model.stats.dim if model.stats.count else None)
    stats = update_class_stats(model.stats if model.stats.count else ClassStats.empty(X.shape[1]), X, exact=True)
    proj = compute_vmp(stats, model.d)
    xi = project(proj, X)
    L = min(model.n_components, xi.shape[0])
    if L < model.n_components:
        logger.warning("class has %d samples; reducing mixture size from %d to %d", xi.shape[0], model.n_components, L)
    model = replace(model, stats=stats, projection=proj, staging_pool=[])
    return fit_gmm(model, xi, G, rng, tol=tol, n_components=L)


def _check_dim(registry: PGMRegistry, X: np.ndarray) -> None:
    dim = registry.dim
    if dim is not None and X.shape[1] != dim:
        raise InputError(f"features have dimension {X.shape[1]}, registry holds dimension {dim}")


def _group(labels: np.ndarray):
    for label in np.unique(labels):
        yield int(label), labels == label


def fit_registry(
    features,
    labels,
    d: int,
    L: int,
    G: int,
    rng,
    tol: float | None = EARLY_STOP_TOL,
    registry: PGMRegistry | None = None,
) -> PGMRegistry:
    """Offline fit of every class in ``labels`` (classes processed in sorted order)."""
    X = _as_matrix(features)
    y = np.asarray(labels)
    if y.shape[0] != X.shape[0]:
        raise InputError("features and labels differ in length")
    registry = registry if registry is not None else PGMRegistry(d=d, n_components=L)
    _check_dim(registry, X)
    for label, mask in _group(y):
        model = registry.models.get(label) or ClassPGM(ClassStats.empty(X.shape[1]), d=d, n_components=L)
        registry.models[label] = initialize_class(model, X[mask], G, rng, tol=tol)
        registry.total_count += int(mask.sum())
    return registry


def staging_threshold(d: int, L: int) -> int:
    return max(d + 1, L)


def ingest_batch(
    registry: PGMRegistry,
    features,
    labels,
    beta: float,
    rng,
    d: int | None = None,
    L: int | None = None,
    tol: float | None = EARLY_STOP_TOL,
) -> PGMRegistry:
    """Streaming update of ``registry`` (in place) with one labelled batch.

    New classes collect samples until ``max(d + 1, L)`` are available and
    are then initialized with a single EM step. Initialized classes get the
    incremental statistics update, a refreshed projection and one streaming
    EM step on the projected batch.
    """
    d = registry.d if d is None else d
    L = registry.n_components if L is None else L
    X = _as_matrix(features)
    y = np.asarray(labels)
    if y.shape[0] != X.shape[0]:
        raise InputError("features and labels differ in length")
    _check_dim(registry, X)
    for label, mask in _group(y):
        Xc = X[mask]
        registry.total_count += Xc.shape[0]
        model = registry.models.get(label) or ClassPGM(ClassStats.empty(X.shape[1]), d=d, n_components=L)
        if not model.initialized:
            pool = model.staging_pool + [row.copy() for row in Xc]
            if len(pool) >= staging_threshold(model.d, model.n_components):
                model = initialize_class(replace(model, staging_pool=[]), np.vstack(pool), 1, rng, tol=tol)
            else:
                model = replace(model, staging_pool=pool)
        else:
            stats = update_class_stats(model.stats, Xc)
            proj = compute_vmp(stats, model.d)
            model = replace(model, stats=stats, projection=proj)
            model = streaming_em_step(model, project(proj, Xc), beta, rng)
        registry.models[label] = model
    return registry


def conditional_log_density(registry: PGMRegistry, features, labels) -> np.ndarray:
    """``log p(xi | y)`` for each row; every label must have an initialized model."""
    X = _as_matrix(features)
    y = np.asarray(labels)
    out = np.empty(X.shape[0])
    for label, mask in _group(y):
        model = registry.models.get(label)
        if model is None or not model.initialized:
            raise StateError(f"no initialized density model for class {label}")
        out[mask] = mixture_log_density(model, project(model.projection, X[mask]))
    return out


def joint_log_density(registry: PGMRegistry, features, labels) -> np.ndarray:
    """``log p(xi | y) + log(n_y / n)`` for each row."""
    y = np.asarray(labels)
    log_prior = np.array([np.log(registry.prior(int(label))) for label in y]) if y.size else np.empty(0)
    return conditional_log_density(registry, features, y) + log_prior


def joint_density(registry: PGMRegistry, features, labels) -> np.ndarray:
    return np.exp(joint_log_density(registry, features, labels))


def class_log_likelihoods(registry: PGMRegistry, features, labels) -> dict[int, float]:
    """Mean projected log-likelihood per class, for reporting."""
    X = _as_matrix(features)
    y = np.asarray(labels)
    return {label: float(np.mean(conditional_log_density(registry, X[mask], y[mask]))) for label, mask in _group(y)}
