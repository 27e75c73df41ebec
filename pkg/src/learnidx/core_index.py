"""Two-stage learned range index.

A root model maps a normalized key to a position estimate; that estimate
selects one of ``M`` linear leaf models, which predicts the final position.
Each leaf carries the signed extremes of its prediction error, so a lookup
only has to binary search ``[pred + err_lo, pred + err_hi]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np

from .models import LIN, LinearModel, ModelArch, NeuralNet, TrainConfig, fit_linear, fit_nn

# Rounded predictions are clipped into this range before integer conversion.
_PRED_CLIP = float(2**52)

# Cap on root training pairs for NN roots; evenly spaced by rank.
ROOT_SAMPLE_CAP = 8192

# Forward-pass cost per architecture, in units of one binary-search probe.
COMPUTE_COST_TABLE = {
    "LIN": 0.3,
    "NN4": 0.9,
    "NN8": 1.5,
    "NN16": 2.7,
    "NN2-4": 1.9,
    "NN2-8": 5.5,
}


class SortedDataset:
    """Strictly ascending uint64 keys; the position of ``keys[i]`` is ``i``."""

    __slots__ = ("keys",)

    def __init__(self, keys):
        keys = np.asarray(keys)
        if keys.dtype != np.uint64:
            if keys.size and (np.any(np.asarray(keys) < 0)):
                raise ValueError("keys must be non-negative")
            keys = keys.astype(np.uint64)
        if keys.ndim != 1:
            raise ValueError("keys must be one-dimensional")
        if keys.size > 1 and not np.all(keys[1:] > keys[:-1]):
            raise ValueError("keys must be strictly ascending")
        self.keys = keys

    @property
    def N(self) -> int:
        return int(self.keys.size)

    def __len__(self) -> int:
        return self.N

    def training_set(self) -> "TrainingSet":
        return TrainingSet(self.keys, np.arange(self.N, dtype=np.float64))


class TrainingPair(NamedTuple):
    key: int
    position: float


@dataclass
class TrainingSet:
    """Key/position pairs as parallel arrays.

    Keys are non-decreasing (duplicates allowed for the duplication
    baseline); positions are non-negative reals.
    """

    keys: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.keys = np.asarray(self.keys).astype(np.uint64, copy=False)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.keys.shape != self.positions.shape:
            raise ValueError("keys and positions must align")

    def __len__(self) -> int:
        return int(self.keys.size)

    @classmethod
    def from_pairs(cls, pairs) -> "TrainingSet":
        pairs = list(pairs)
        return cls(
            np.array([int(p[0]) for p in pairs], dtype=np.uint64),
            np.array([float(p[1]) for p in pairs], dtype=np.float64),
        )

    def pairs(self) -> list[TrainingPair]:
        return [TrainingPair(int(k), float(p)) for k, p in zip(self.keys, self.positions)]


@dataclass
class LeafModel:
    model: LinearModel
    err_lo: int = 0
    err_hi: int = 0
    key_count: int = 0


@dataclass
class StagedIndex:
    root: object
    leaves: list[LeafModel]
    N: int
    key_min: int
    key_max: int
    pos_span: float
    arch: ModelArch = field(default=LIN)

    @property
    def M(self) -> int:
        return len(self.leaves)

    @cached_property
    def _leaf_arrays(self):
        slopes = np.array([lf.model.slope for lf in self.leaves], dtype=np.float64)
        intercepts = np.array([lf.model.intercept for lf in self.leaves], dtype=np.float64)
        lo = np.array([lf.err_lo for lf in self.leaves], dtype=np.int64)
        hi = np.array([lf.err_hi for lf in self.leaves], dtype=np.int64)
        return slopes, intercepts, lo, hi

    def leaf_arrays(self):
        """``(slopes, intercepts, err_lo, err_hi)`` as arrays; leaves must not be mutated after first use."""
        return self._leaf_arrays


def normalize_keys(keys, key_min: int, key_max: int) -> np.ndarray:
    k = np.asarray(keys).astype(np.float64)
    span = float(key_max) - float(key_min)
    if span <= 0:
        return np.zeros_like(k)
    return (k - float(key_min)) / span


def _root_predict_norm(index: StagedIndex, keys) -> np.ndarray:
    x = normalize_keys(np.atleast_1d(keys), index.key_min, index.key_max)
    return np.asarray(index.root.predict(x), dtype=np.float64)


def route_many(index: StagedIndex, keys) -> np.ndarray:
    """Leaf ids for ``keys``: ``floor(M * f0(x) / span)`` clamped to ``[0, M-1]``."""
    # f0 / span is exactly the root's normalized output
    with np.errstate(invalid="ignore", over="ignore"):
        raw = np.floor(index.M * _root_predict_norm(index, keys))
    raw = np.nan_to_num(raw, nan=0.0, posinf=index.M - 1, neginf=0.0)
    return np.clip(raw, 0, index.M - 1).astype(np.int64)


def route(index: StagedIndex, key) -> int:
    return int(route_many(index, np.array([key], dtype=np.uint64))[0])


def round_half_up(pred) -> np.ndarray:
    p = np.clip(np.nan_to_num(np.asarray(pred, dtype=np.float64), nan=0.0), -_PRED_CLIP, _PRED_CLIP)
    return np.floor(p + 0.5).astype(np.int64)


def _leaf_predict(slopes, intercepts, leaf_ids, keys) -> np.ndarray:
    k = np.asarray(keys).astype(np.float64)
    return slopes[leaf_ids] * k + intercepts[leaf_ids]


def predict_many(index: StagedIndex, keys):
    """Return ``(leaf_ids, raw predictions)`` for an array of keys."""
    keys = np.atleast_1d(np.asarray(keys)).astype(np.uint64, copy=False)
    leaf_ids = route_many(index, keys)
    slopes, intercepts, _, _ = index.leaf_arrays()
    return leaf_ids, _leaf_predict(slopes, intercepts, leaf_ids, keys)


def _fit_leaves(keys: np.ndarray, targets: np.ndarray, leaf_ids: np.ndarray, M: int) -> list[LinearModel]:
    """Closed-form least squares for every leaf at once via grouped sums."""
    x = keys.astype(np.float64)
    counts = np.bincount(leaf_ids, minlength=M).astype(np.float64)
    safe = np.where(counts > 0, counts, 1.0)
    x_mean = np.bincount(leaf_ids, weights=x, minlength=M) / safe
    y_mean = np.bincount(leaf_ids, weights=targets, minlength=M) / safe
    dx = x - x_mean[leaf_ids]
    dy = targets - y_mean[leaf_ids]
    sxx = np.bincount(leaf_ids, weights=dx * dx, minlength=M)
    sxy = np.bincount(leaf_ids, weights=dx * dy, minlength=M)
    degenerate = sxx <= 0.0
    slope = np.where(degenerate, 0.0, sxy / np.where(degenerate, 1.0, sxx))
    intercept = y_mean - slope * x_mean

    models: list[Optional[LinearModel]] = [None] * M
    nonempty = np.flatnonzero(counts > 0)
    for j in nonempty:
        models[j] = LinearModel(float(slope[j]), float(intercept[j]))

    # Empty leaves get a constant midway between their neighbours' ranges.
    if nonempty.size < M:
        tmin = np.full(M, np.inf)
        tmax = np.full(M, -np.inf)
        np.minimum.at(tmin, leaf_ids, targets)
        np.maximum.at(tmax, leaf_ids, targets)
        prev_hi = None
        for j in range(M):
            if counts[j] > 0:
                prev_hi = tmax[j]
                continue
            after = np.searchsorted(nonempty, j)
            next_lo = tmin[nonempty[after]] if after < nonempty.size else None
            if prev_hi is None and next_lo is None:
                mid = 0.0
            elif prev_hi is None:
                mid = next_lo
            elif next_lo is None:
                mid = prev_hi
            else:
                mid = (prev_hi + next_lo) / 2.0
            models[j] = LinearModel(0.0, float(mid))
    return models


def _bounds_from(leaf_ids, errors_lo, errors_hi, M):
    lo = np.zeros(M, dtype=np.int64)
    hi = np.zeros(M, dtype=np.int64)
    counts = np.bincount(leaf_ids, minlength=M)
    if leaf_ids.size:
        lo_full = np.full(M, np.iinfo(np.int64).max, dtype=np.int64)
        hi_full = np.full(M, np.iinfo(np.int64).min, dtype=np.int64)
        np.minimum.at(lo_full, leaf_ids, errors_lo)
        np.maximum.at(hi_full, leaf_ids, errors_hi)
        has = counts > 0
        lo[has] = lo_full[has]
        hi[has] = hi_full[has]
    return lo, hi, counts


def root_training_data(ts: TrainingSet, sample_cap: int = ROOT_SAMPLE_CAP):
    """Normalized ``(x, y)`` the root is trained on, plus the normalization."""
    keys = ts.keys
    key_min, key_max = int(keys.min()), int(keys.max())
    pos_span = float(ts.positions.max()) + 1.0
    x = normalize_keys(keys, key_min, key_max)
    y = ts.positions / pos_span
    if x.size > sample_cap:
        idx = np.linspace(0, x.size - 1, sample_cap).round().astype(np.int64)
        x, y = x[idx], y[idx]
    return x, y, key_min, key_max, pos_span


def fit_root(ts: TrainingSet, arch: ModelArch, cfg: TrainConfig, sample_cap: int = ROOT_SAMPLE_CAP):
    if arch.is_linear:
        # closed form is cheap enough to use every pair
        x, y, *_ = root_training_data(ts, sample_cap=len(ts))
        return fit_linear((x, y))
    x, y, *_ = root_training_data(ts, sample_cap)
    return fit_nn((x, y), arch, cfg)


def train_staged(
    pairs,
    arch: ModelArch,
    M: int,
    cfg: TrainConfig,
    root_sample_cap: int = ROOT_SAMPLE_CAP,
    root=None,
) -> StagedIndex:
    """Fit the root on all pairs, route, then fit one line per leaf.

    ``root`` may be a pre-trained root (already in normalized space), in
    which case only the leaves are fitted.
    """
    ts = pairs if isinstance(pairs, TrainingSet) else TrainingSet.from_pairs(pairs)
    if len(ts) == 0:
        raise ValueError("empty training set")
    if M <= 0:
        raise ValueError("leaf count M must be positive")
    keys = ts.keys
    key_min, key_max = int(keys.min()), int(keys.max())
    pos_span = float(ts.positions.max()) + 1.0

    if root is None:
        root = fit_root(ts, arch, cfg, root_sample_cap)
    skeleton = StagedIndex(root, [LeafModel(LinearModel(0.0, 0.0))] * M, len(ts), key_min, key_max, pos_span, arch)
    leaf_ids = route_many(skeleton, keys)
    models = _fit_leaves(keys, ts.positions, leaf_ids, M)

    slopes = np.array([m.slope for m in models])
    intercepts = np.array([m.intercept for m in models])
    pred = round_half_up(_leaf_predict(slopes, intercepts, leaf_ids, keys))
    lo, hi, counts = _bounds_from(
        leaf_ids,
        np.floor(ts.positions).astype(np.int64) - pred,
        np.ceil(ts.positions).astype(np.int64) - pred,
        M,
    )
    leaves = [LeafModel(models[j], int(lo[j]), int(hi[j]), int(counts[j])) for j in range(M)]
    return replace(skeleton, leaves=leaves)


def compute_error_bounds(index: StagedIndex, data: SortedDataset) -> StagedIndex:
    """Recompute every leaf's signed error range against ``data``."""
    keys = data.keys
    leaf_ids, raw = predict_many(index, keys)
    err = np.arange(data.N, dtype=np.int64) - round_half_up(raw)
    lo, hi, counts = _bounds_from(leaf_ids, err, err, index.M)
    leaves = [
        LeafModel(lf.model, int(lo[j]), int(hi[j]), int(counts[j])) for j, lf in enumerate(index.leaves)
    ]
    return replace(index, leaves=leaves, N=data.N)


def search_window(index: StagedIndex, keys):
    """Clamped inclusive ``[lo, hi]`` search windows for ``keys``."""
    keys = np.atleast_1d(np.asarray(keys)).astype(np.uint64, copy=False)
    leaf_ids, raw = predict_many(index, keys)
    _, _, err_lo, err_hi = index.leaf_arrays()
    pred = round_half_up(raw)
    lo = np.maximum(pred + err_lo[leaf_ids], 0)
    hi = np.minimum(pred + err_hi[leaf_ids], index.N - 1)
    return lo, hi


def lookup_many(index: StagedIndex, data: SortedDataset, keys) -> np.ndarray:
    """Vectorized bounded binary search; ``-1`` marks an absent key."""
    keys = np.atleast_1d(np.asarray(keys)).astype(np.uint64, copy=False)
    lo, hi = search_window(index, keys)
    arr = data.keys
    found = np.full(keys.size, -1, dtype=np.int64)
    if data.N == 0:
        return found
    # lower-bound search on [lo, hi + 1)
    left = lo.copy()
    right = np.maximum(hi + 1, lo)
    active = left < right
    while np.any(active):
        mid = (left + right) // 2
        m = np.where(active, mid, 0)
        go_right = active & (arr[m] < keys)
        go_left = active & ~go_right
        left = np.where(go_right, mid + 1, left)
        right = np.where(go_left, mid, right)
        active = left < right
    in_window = left <= hi
    probe = np.where(in_window, left, 0)
    hit = in_window & (arr[probe] == keys)
    found[hit] = left[hit]
    return found


def lookup(index: StagedIndex, data: SortedDataset, key) -> Optional[int]:
    """Exact position of ``key`` in ``data``, or ``None`` when absent."""
    if key < 0:
        return None
    lo, hi = search_window(index, np.array([key], dtype=np.uint64))
    lo, hi = int(lo[0]), int(hi[0])
    arr = data.keys
    key = int(key)
    while lo <= hi:
        mid = (lo + hi) // 2
        k = int(arr[mid])
        if k < key:
            lo = mid + 1
        elif k > key:
            hi = mid - 1
        else:
            return mid
    return None


def compute_constant(arch: ModelArch, table: Optional[dict] = None) -> float:
    table = COMPUTE_COST_TABLE if table is None else table
    if arch.name in table:
        return float(table[arch.name])
    # widths outside the default table: scale with forward-pass flops
    return 0.25 + arch.flops() / 32.0


@dataclass
class IndexMetrics:
    mean_width: float
    weighted_width: Optional[float]
    leaf_widths: np.ndarray
    key_widths: np.ndarray
    search_term: float
    compute_term: float

    @property
    def cost(self) -> float:
        return self.search_term + self.compute_term


def index_metrics(index: StagedIndex, data: SortedDataset, freq=None, compute_table: Optional[dict] = None) -> IndexMetrics:
    """Bound-width statistics and the lookup-cost proxy.

    Widths are averaged per key (the leaf width each key is searched
    with). With ``freq`` the averages are access-weighted instead.
    """
    leaf_ids = route_many(index, data.keys)
    _, _, lo, hi = index.leaf_arrays()
    leaf_widths = (hi - lo).astype(np.float64)
    key_widths = leaf_widths[leaf_ids]
    steps = np.log2(np.maximum(2.0, key_widths + 1.0))
    mean_width = float(key_widths.mean()) if key_widths.size else 0.0
    weighted = None
    if freq is not None and getattr(freq, "total", 0) > 0:
        w = np.asarray(freq.counts, dtype=np.float64)
        weighted = float(np.dot(w, key_widths) / w.sum())
        search = float(np.dot(w, steps) / w.sum())
    else:
        search = float(steps.mean()) if steps.size else 1.0
    return IndexMetrics(mean_width, weighted, leaf_widths, key_widths, search, compute_constant(index.arch, compute_table))


# -- serialization -----------------------------------------------------------

MAGIC = b"DRMI"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHI")  # magic, version, flags, sketch length K
_ARCH = struct.Struct("<BBH")  # kind, hidden layers, width
_SHAPE = struct.Struct("<QQQQd")  # N, M, key_min, key_max, pos_span
_LEAF = np.dtype([("slope", "<f8"), ("intercept", "<f8"), ("err_lo", "<i8"), ("err_hi", "<i8"), ("count", "<u8")])


def dumps_index(index: StagedIndex, sketch=None) -> bytes:
    """Encode an index (and optionally a sketch header) as a DRMI blob."""
    sk = np.asarray([] if sketch is None else sketch, dtype="<f8")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, 0, sk.size), sk.tobytes()]
    arch = index.arch
    parts.append(_ARCH.pack(0 if arch.is_linear else 1, arch.hidden_layers, arch.width))
    parts.append(_SHAPE.pack(index.N, index.M, index.key_min, index.key_max, index.pos_span))
    if arch.is_linear:
        parts.append(np.array([index.root.slope, index.root.intercept], dtype="<f8").tobytes())
    else:
        parts.append(np.array([index.root.final_loss], dtype="<f8").tobytes())
        parts.append(index.root.flat_params().astype("<f8").tobytes())
    table = np.zeros(index.M, dtype=_LEAF)
    s, b, lo, hi = index.leaf_arrays()
    table["slope"], table["intercept"], table["err_lo"], table["err_hi"] = s, b, lo, hi
    table["count"] = [lf.key_count for lf in index.leaves]
    parts.append(table.tobytes())
    return b"".join(parts)


def loads_index(blob: bytes):
    """Decode a DRMI blob; returns ``(index, sketch_or_None)``."""
    mv = memoryview(blob)
    if len(blob) < _HEADER.size:
        raise ValueError("truncated index blob")
    magic, version, _flags, K = _HEADER.unpack_from(mv, 0)
    if magic != MAGIC:
        raise ValueError("not a DRMI blob")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported DRMI version {version}")
    off = _HEADER.size
    sketch = np.frombuffer(mv, dtype="<f8", count=K, offset=off).copy() if K else None
    off += 8 * K
    kind, hidden, width = _ARCH.unpack_from(mv, off)
    off += _ARCH.size
    arch = ModelArch() if kind == 0 else ModelArch(hidden, width)
    N, M, key_min, key_max, pos_span = _SHAPE.unpack_from(mv, off)
    off += _SHAPE.size
    if arch.is_linear:
        slope, intercept = np.frombuffer(mv, dtype="<f8", count=2, offset=off)
        off += 16
        root = LinearModel(float(slope), float(intercept))
    else:
        (final_loss,) = np.frombuffer(mv, dtype="<f8", count=1, offset=off)
        off += 8
        widths = arch.layer_widths
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weights.append(np.frombuffer(mv, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(fan_in, fan_out).astype(np.float64))
            off += 8 * fan_in * fan_out
            biases.append(np.frombuffer(mv, dtype="<f8", count=fan_out, offset=off).astype(np.float64))
            off += 8 * fan_out
        root = NeuralNet(widths, weights, biases, float(final_loss), arch)
    if len(blob) - off != M * _LEAF.itemsize:
        raise ValueError("leaf table size mismatch")
    table = np.frombuffer(mv, dtype=_LEAF, count=M, offset=off)
    leaves = [
        LeafModel(LinearModel(float(r["slope"]), float(r["intercept"])), int(r["err_lo"]), int(r["err_hi"]), int(r["count"]))
        for r in table
    ]
    return StagedIndex(root, leaves, int(N), int(key_min), int(key_max), float(pos_span), arch), sketch
