"""Small ReLU network (input -> 64 -> 64 -> K) trained with plain SGD in numpy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from ..errors import InputError

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 0.1
    warmup_epochs: int = 10
    batch_size: int = 128
    hidden: int = 64

    def __post_init__(self):
        if self.epochs < self.warmup_epochs:
            raise InputError("epochs must be >= warmup_epochs")
        if self.batch_size < 1 or self.hidden < 1:
            raise InputError("batch_size and hidden must be positive")


@dataclass
class MlpModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @classmethod
    def init(cls, n_in: int, n_out: int, rng, hidden: int = 64) -> "MlpModel":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        params = {}
        for i, (a, b) in enumerate([(n_in, hidden), (hidden, hidden), (hidden, n_out)], start=1):
            bound = 1.0 / math.sqrt(a)
            params[f"W{i}"] = rng.uniform(-bound, bound, size=(a, b))
            params[f"b{i}"] = rng.uniform(-bound, bound, size=b)
        return cls(**params)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def logits(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        h1 = np.maximum(X @ self.W1 + self.b1, 0.0)
        h2 = np.maximum(h1 @ self.W2 + self.b2, 0.0)
        return h2 @ self.W3 + self.b3

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.logits(X), axis=1)


def loss_and_grad(model: MlpModel, X, y) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy and its gradient with respect to every parameter."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y)
    n = X.shape[0]
    a1 = X @ model.W1 + model.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ model.W2 + model.b2
    h2 = np.maximum(a2, 0.0)
    logits = h2 @ model.W3 + model.b3
    logp = log_softmax(logits, axis=1)
    loss = -float(np.mean(logp[np.arange(n), y]))

    g3 = np.exp(logp)
    g3[np.arange(n), y] -= 1.0
    g3 /= n
    g2 = (g3 @ model.W3.T) * (a2 > 0)
    g1 = (g2 @ model.W2.T) * (a1 > 0)
    grads = {
        "W3": h2.T @ g3,
        "b3": g3.sum(axis=0),
        "W2": h1.T @ g2,
        "b2": g2.sum(axis=0),
        "W1": X.T @ g1,
        "b1": g1.sum(axis=0),
    }
    return loss, grads


def lr_at(epoch: float, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr`` then cosine decay to 0 at ``epochs``."""
    if epoch < config.warmup_epochs:
        return config.lr * epoch / config.warmup_epochs
    span = config.epochs - config.warmup_epochs
    if span == 0:
        return config.lr
    progress = min((epoch - config.warmup_epochs) / span, 1.0)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def train_mlp(X, y, n_classes: int, config: TrainConfig, rng, init_rng=None) -> MlpModel:
    """Mini-batch SGD on softmax cross-entropy.

    ``init_rng`` (defaults to ``rng``) draws the initial weights; ``rng``
    shuffles the data each epoch. The learning rate is evaluated at the
    fractional epoch where each step starts.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y)
    n = X.shape[0]
    if n == 0:
        raise InputError("cannot train on an empty dataset")
    model = MlpModel.init(X.shape[1], n_classes, init_rng if init_rng is not None else rng, config.hidden)
    steps = math.ceil(n / config.batch_size)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for s in range(steps):
            lr = lr_at(epoch + s / steps, config)
            batch = order[s * config.batch_size:(s + 1) * config.batch_size]
            _, grads = loss_and_grad(model, X[batch], y[batch])
            for name, g in grads.items():
                param = getattr(model, name)
                param -= lr * g
    return model
