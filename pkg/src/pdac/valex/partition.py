"""Axis-aligned grid over a centered square and per-cell resampling mass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputError


@dataclass(frozen=True)
class RegionPartition:
    """Square of side ``side`` centered at the origin, cut into cells of width ``m``.

    Points outside the square are clamped to the nearest boundary cell.
    """

    side: float = 20.0
    m: float = 0.4
    dim: int = 2

    def __post_init__(self):
        ratio = self.side / self.m
        if self.side <= 0 or self.m <= 0 or abs(ratio - round(ratio)) > 1e-9:
            raise InputError(f"side {self.side} is not an integer multiple of cell width {self.m}")

    @property
    def cells_per_axis(self) -> int:
        return int(round(self.side / self.m))

    @property
    def n_regions(self) -> int:
        return self.cells_per_axis ** self.dim


def region_index(part: RegionPartition, x) -> np.ndarray | int:
    """Row-major cell index of each point (first coordinate varies slowest)."""
    arr = np.asarray(x, dtype=float)
    X = np.atleast_2d(arr)
    if X.shape[1] != part.dim:
        raise InputError(f"points must have dimension {part.dim}")
    n = part.cells_per_axis
    cells = np.floor((X + part.side / 2.0) / part.m).astype(np.int64)
    cells = np.clip(cells, 0, n - 1)
    idx = np.zeros(X.shape[0], dtype=np.int64)
    for axis in range(part.dim):
        idx = idx * n + cells[:, axis]
    return int(idx[0]) if arr.ndim == 1 else idx


def region_probabilities(weights, regions, n_regions: int) -> np.ndarray:
    """Mass ``p_i = sum_{j in region i} pi_j / sum_k pi_k`` for every region."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        raise InputError("weights must have positive total mass")
    return np.bincount(np.asarray(regions), weights=w, minlength=n_regions) / total


def region_probability(weights, part: RegionPartition, x, i: int) -> float:
    """Resampling mass of region ``i`` for a weighted dataset ``x``."""
    regions = region_index(part, np.atleast_2d(x))
    return float(region_probabilities(weights, regions, part.n_regions)[i])


def region_counts(regions, n_regions: int) -> np.ndarray:
    """``l_i``: number of points in each region."""
    return np.bincount(np.asarray(regions), minlength=n_regions)
