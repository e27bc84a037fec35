"""Replay-buffer construction driven by estimated sample density.

Offline (:func:`pdac_update`): after each task, draw that task's quota from
its training set with probability proportional to estimated density, and
shrink older tasks to their new quotas by evicting preferentially the
low-density entries.

Streaming (:func:`spdac_process_batch`): a reservoir-style insertion rule in
which the acceptance threshold of each incoming sample is scaled by its
density relative to the rest of its batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from scipy.special import logsumexp

from . import pgm
from .errors import InfeasibleAllocationError, InputError

logger = logging.getLogger(__name__)

# slack on the acceptance test so that eps == 1 up to rounding behaves like eps == 1
ACCEPT_RTOL = 1e-12


@dataclass(frozen=True)
class BufferEntry:
    sample_id: Hashable
    task_id: int
    label: int
    log_density: float
    feature: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass
class MemoryBuffer:
    """Fixed-capacity store of replay samples.

    ``allocation`` maps task id to its quota as of the last offline update.
    """

    capacity: int
    entries: list[BufferEntry] = field(default_factory=list)
    allocation: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity < 0:
            raise InputError("buffer capacity must be non-negative")
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate sample ids in buffer")
        if len(ids) > self.capacity:
            raise InputError("more entries than capacity")
        self._ids = set(ids)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, sample_id) -> bool:
        return sample_id in self._ids

    @property
    def is_full(self) -> bool:
        return len(self.entries) >= self.capacity

    def append(self, entry: BufferEntry) -> None:
        if len(self.entries) >= self.capacity:
            raise InputError("buffer is full")
        if entry.sample_id in self._ids:
            raise InputError(f"sample {entry.sample_id!r} already stored")
        self.entries.append(entry)
        self._ids.add(entry.sample_id)

    def replace_at(self, slot: int, entry: BufferEntry) -> None:
        old = self.entries[slot]
        if entry.sample_id in self._ids and entry.sample_id != old.sample_id:
            raise InputError(f"sample {entry.sample_id!r} already stored")
        self._ids.discard(old.sample_id)
        self.entries[slot] = entry
        self._ids.add(entry.sample_id)

    def remove(self, sample_ids) -> None:
        drop = set(sample_ids)
        self.entries = [e for e in self.entries if e.sample_id not in drop]
        self._ids -= drop

    def task_entries(self, task_id: int) -> list[BufferEntry]:
        return [e for e in self.entries if e.task_id == task_id]

    def task_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.task_id] = counts.get(e.task_id, 0) + 1
        return dict(sorted(counts.items()))


@dataclass
class SelectionWeights:
    ids: list
    probabilities: np.ndarray

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=float)
        if len(self.ids) != self.probabilities.shape[0]:
            raise InputError("ids and probabilities differ in length")


def allocate_quotas(N: int, t: int) -> dict[int, int]:
    """Split capacity ``N`` over tasks ``1..t``; the ``N mod t`` extra slots go to the newest tasks."""
    if t < 1:
        raise InputError("task index must be >= 1")
    if N < t:
        raise InfeasibleAllocationError(f"capacity {N} cannot hold {t} tasks")
    base, extra = divmod(N, t)
    return {task: base + (1 if task > t - extra else 0) for task in range(1, t + 1)}


def _ids_for(values: np.ndarray, ids) -> list:
    return list(range(values.shape[0])) if ids is None else list(ids)


def density_weights(log_densities, ids=None) -> SelectionWeights:
    """Normalize densities given as logs; all ``-inf`` falls back to uniform."""
    logs = np.asarray(log_densities, dtype=float)
    if logs.size == 0:
        raise InputError("need at least one density")
    if np.any(np.isnan(logs)) or np.any(logs == np.inf):
        raise InputError("log-densities must be finite or -inf")
    if np.all(logs == -np.inf):
        probs = np.full(logs.shape[0], 1.0 / logs.shape[0])
    else:
        probs = np.exp(logs - logsumexp(logs))
    return SelectionWeights(_ids_for(logs, ids), probs)


def inverse_density_weights(log_densities, ids=None) -> SelectionWeights:
    """Eviction weights proportional to ``max(1 - p, 0)``.

    Densities at or above 1 get weight 0. If every weight is 0 the result is
    uniform.
    """
    logs = np.asarray(log_densities, dtype=float)
    if logs.size == 0:
        raise InputError("need at least one density")
    # 1 - exp(l) without cancellation for small p
    w = np.where(logs < 0, -np.expm1(np.minimum(logs, 0.0)), 0.0)
    total = w.sum()
    probs = w / total if total > 0 else np.full(w.shape[0], 1.0 / w.shape[0])
    return SelectionWeights(_ids_for(logs, ids), probs)


def weighted_sample_without_replacement(weights: SelectionWeights, k: int, rng) -> list:
    """Draw ``k`` distinct ids, sequentially proportional to weight.

    Uses Gumbel top-k keys, which has the same law as repeated draws with
    renormalization. When fewer than ``k`` ids have positive weight, all of
    them are taken and the rest is filled uniformly from the zero-weight ids.
    """
    p = weights.probabilities
    n = p.shape[0]
    if not 0 <= k <= n:
        raise InputError(f"cannot draw {k} items from {n}")
    gumbel = rng.gumbel(size=n)
    with np.errstate(divide="ignore"):
        keys = np.log(p) + gumbel
    positive = np.flatnonzero(p > 0)
    order = positive[np.argsort(-keys[positive], kind="stable")]
    if k > order.shape[0]:
        zero = np.flatnonzero(~(p > 0))
        order = np.concatenate([order, rng.permutation(zero)])
    return [weights.ids[i] for i in order[:k]]


def _entry_log_densities(entries: Sequence[BufferEntry], registry: pgm.PGMRegistry | None, recompute: bool) -> np.ndarray:
    stored = np.array([e.log_density for e in entries], dtype=float)
    if not recompute or registry is None:
        return stored
    out = stored.copy()
    live = [i for i, e in enumerate(entries) if e.feature is not None and registry.is_ready(e.label)]
    if live:
        feats = np.vstack([entries[i].feature for i in live])
        labels = np.array([entries[i].label for i in live])
        out[live] = pgm.joint_log_density(registry, feats, labels)
    return out


def pdac_update(
    buffer: MemoryBuffer,
    registry: pgm.PGMRegistry,
    sample_ids: Sequence,
    features,
    labels,
    t: int,
    rng,
    recompute: bool = True,
    keep_features: bool = True,
) -> MemoryBuffer:
    """Offline buffer update at the end of task ``t`` (modifies ``buffer`` in place).

    The task's quota is drawn without replacement with probability
    proportional to the joint density estimate. Each earlier task is then cut
    down to its new quota, evicting with probability proportional to
    ``1 - p``. Eviction scores are recomputed under the current registry for
    entries that kept their features (``recompute=True``), else the density
    stored at selection time is used. Eviction happens before insertion, so
    the buffer never exceeds its capacity.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels)
    ids = list(sample_ids)
    if not (len(ids) == X.shape[0] == y.shape[0]):
        raise InputError("sample_ids, features and labels differ in length")
    quotas = allocate_quotas(buffer.capacity, t)
    k = quotas[t]
    if len(ids) < k:
        logger.warning("task %d has %d samples, below its quota of %d; storing all", t, len(ids), k)
        k = len(ids)

    log_p = pgm.joint_log_density(registry, X, y)
    chosen = weighted_sample_without_replacement(density_weights(log_p, ids=range(len(ids))), k, rng)

    if len(buffer) + k > buffer.capacity:
        for prev in range(1, t):
            held = buffer.task_entries(prev)
            surplus = max(0, len(held) - quotas[prev])
            if surplus == 0:
                continue
            scores = _entry_log_densities(held, registry, recompute)
            evict_w = inverse_density_weights(scores, ids=[e.sample_id for e in held])
            buffer.remove(weighted_sample_without_replacement(evict_w, surplus, rng))

    for i in chosen:
        buffer.append(
            BufferEntry(ids[i], t, int(y[i]), float(log_p[i]), X[i].copy() if keep_features else None)
        )
    buffer.allocation = quotas
    return buffer


def spdac_insert(buffer: MemoryBuffer, entries: Sequence[BufferEntry], probabilities, n_before: int, rng) -> MemoryBuffer:
    """Density-scaled reservoir insertion of one batch (in place).

    ``probabilities`` are the within-batch selection probabilities and
    ``n_before`` the number of samples observed before this batch. The j-th
    sample of the batch (1-based) draws ``c`` uniformly from
    ``1..n_before + j`` and, once the buffer is full, replaces a uniformly
    chosen slot when ``c * pi * |B| <= N``. A sample with ``pi == 0`` has no
    resampling mass and is never swapped in. With uniform probabilities this
    is classical reservoir sampling.
    """
    B = len(entries)
    if B == 0:
        return buffer
    eps = np.asarray(probabilities, dtype=float) * B
    seen = n_before + np.arange(1, B + 1)
    c = rng.integers(1, seen, endpoint=True)
    u = rng.random(B)
    N = buffer.capacity
    limit = N * (1.0 + ACCEPT_RTOL)
    accept = (eps > 0) & (c * eps <= limit)
    for j in range(B):
        if len(buffer.entries) < N:
            buffer.append(entries[j])
        elif accept[j] and N > 0:
            buffer.replace_at(int(u[j] * len(buffer.entries)), entries[j])
    return buffer


def batch_selection_probabilities(registry: pgm.PGMRegistry, features, labels) -> tuple[np.ndarray, np.ndarray]:
    """Within-batch selection probabilities and log-densities.

    Samples whose class is still staged get probability ``1/|B|`` (and log
    density NaN); the remaining mass is split among the other samples in
    proportion to their estimated joint density.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels)
    B = y.shape[0]
    ready = np.array([registry.is_ready(int(label)) for label in y], dtype=bool)
    log_p = np.full(B, np.nan)
    probs = np.full(B, 1.0 / B)
    if ready.any():
        log_p[ready] = pgm.joint_log_density(registry, X[ready], y[ready])
        mass = ready.sum() / B
        probs[ready] = mass * density_weights(log_p[ready]).probabilities
    return probs, log_p


def spdac_process_batch(
    buffer: MemoryBuffer,
    registry: pgm.PGMRegistry,
    sample_ids: Sequence,
    features,
    labels,
    rng,
    task_id: int = 0,
    keep_features: bool = False,
) -> MemoryBuffer:
    """Streaming buffer update for a batch already ingested into ``registry``."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels)
    ids = list(sample_ids)
    if not (len(ids) == X.shape[0] == y.shape[0]):
        raise InputError("sample_ids, features and labels differ in length")
    if not ids:
        return buffer
    probs, log_p = batch_selection_probabilities(registry, X, y)
    entries = [
        BufferEntry(ids[i], task_id, int(y[i]), float(log_p[i]), X[i].copy() if keep_features else None)
        for i in range(len(ids))
    ]
    return spdac_insert(buffer, entries, probs, registry.total_count - len(ids), rng)
