import numpy as np
import pytest

from pdac import pgm


def make_model(weights, means, covs, d=None, L=None):
    """Initialized ClassPGM with the given components and a trivial projection."""
    means = [np.atleast_1d(np.asarray(m, dtype=float)) for m in means]
    dim = means[0].shape[0]
    comps = [
        pgm.GaussianComponent(float(w), m, np.atleast_2d(np.asarray(c, dtype=float)))
        for w, m, c in zip(weights, means, covs)
    ]
    return pgm.ClassPGM(
        stats=pgm.ClassStats(1, np.zeros(dim), np.eye(dim)),
        d=d or dim,
        n_components=L or len(comps),
        projection=pgm.ProjectionMatrix(np.eye(dim), np.zeros(dim)),
        components=comps,
        initialized=True,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def three_class_features(rng, n_per_class=200, D=6):
    """Labelled Gaussian blobs in D dimensions with class-specific anisotropic spreads."""
    X, y = [], []
    for k in range(3):
        A = rng.normal(size=(D, D)) * (0.3 + 0.2 * k)
        center = rng.normal(scale=4.0, size=D)
        X.append(center + rng.normal(size=(n_per_class, D)) @ A)
        y.append(np.full(n_per_class, k))
    return np.vstack(X), np.concatenate(y)
