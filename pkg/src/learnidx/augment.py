"""Frequency-aware training-set augmentation and leaf finalization.

Hot keys get a weight ``w >= 1``. Duplication repeats a key ``round(w)``
times at its original position; stretching instead gives each key ``w``
position slots so hot keys spread out and land in more, smaller leaves.
After training on a stretched set the leaves must be refit against the
real positions, which is what :func:`finalize` does.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .core_index import (
    SortedDataset,
    StagedIndex,
    TrainingSet,
    _fit_leaves,
    compute_error_bounds,
    route_many,
)
from .workload import FrequencyHistogram

log = logging.getLogger(__name__)

DEFAULT_CAP = 16.0


@dataclass
class WeightVector:
    weights: np.ndarray
    f_min: float
    cap: float
    smoothed: bool = True


def compute_weights(hist: FrequencyHistogram, cap: float = DEFAULT_CAP, raw: bool = False) -> WeightVector:
    """Min-normalized access weights, clipped to ``cap``.

    Default mode adds one to every count first; ``raw=True`` skips the
    smoothing and the cap so small hand examples come out verbatim.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    counts = np.asarray(hist.counts, dtype=np.float64)
    n = counts.size
    if n == 0 or not np.any(counts > 0):
        if n:
            log.info("all-zero histogram; using uniform weights")
        return WeightVector(np.ones(n), 1.0, cap, not raw)
    if raw:
        f_min = float(counts[counts > 0].min())
        w = np.where(counts > 0, counts / f_min, 1.0)
        return WeightVector(np.maximum(w, 1.0), f_min, math.inf, False)
    smoothed = counts + 1.0
    f_min = float(smoothed.min())
    w = np.minimum(cap, smoothed / f_min)
    w[counts == 0] = 1.0
    return WeightVector(np.maximum(w, 1.0), f_min, cap, True)


def _round_half_up(w: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(w) + 0.5).astype(np.int64)


def duplicate_augment(data: SortedDataset, hist: FrequencyHistogram, cap: float = DEFAULT_CAP, raw: bool = False) -> TrainingSet:
    """Repeat key ``i`` ``round(w_i)`` times, keeping its original position."""
    w = compute_weights(hist, cap, raw).weights
    reps = np.maximum(_round_half_up(w), 1)
    idx = np.repeat(np.arange(data.N), reps)
    return TrainingSet(data.keys[idx], idx.astype(np.float64))


@dataclass
class StretchedTrainingSet(TrainingSet):
    stretched_total: float = 0.0


def stretch(data: SortedDataset, w: WeightVector) -> StretchedTrainingSet:
    """Position of key ``i`` becomes ``sum(w[:i]) + (w[i] - 1) / 2``."""
    weights = np.asarray(w.weights, dtype=np.float64)
    if weights.size != data.N:
        raise ValueError("weight vector is not aligned with the dataset")
    if np.any(weights < 1) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and >= 1")
    before = np.concatenate([[0.0], np.cumsum(weights)[:-1]])
    positions = before + (weights - 1.0) / 2.0
    return StretchedTrainingSet(data.keys, positions, float(weights.sum()))


def finalize(index: StagedIndex, data: SortedDataset) -> StagedIndex:
    """Refit every leaf on the real positions of ``data``; the root is kept."""
    leaf_ids = route_many(index, data.keys)
    models = _fit_leaves(data.keys, np.arange(data.N, dtype=np.float64), leaf_ids, index.M)
    leaves = [replace(lf, model=m) for lf, m in zip(index.leaves, models)]
    return compute_error_bounds(replace(index, leaves=leaves), data)
