"""Model reuse: distribution sketches, the model cache, grid-search tuning.

A training set is summarized by a fixed-length sketch of normalized
quantile keys. The cache maps sketches to trained indexes; a close enough
match is fine-tuned instead of searching architectures from scratch.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import finalize
from .core_index import (
    ROOT_SAMPLE_CAP,
    SortedDataset,
    StagedIndex,
    TrainingSet,
    compute_constant,
    compute_error_bounds,
    dumps_index,
    index_metrics,
    loads_index,
    root_training_data,
    route_many,
    train_staged,
)
from .models import DEFAULT_ARCHS, ModelArch, TrainConfig, TrainingDiverged, fine_tune

log = logging.getLogger(__name__)

DEFAULT_K = 64
DEFAULT_TAU = 1e-3
DEFAULT_CAPACITY = 128
CACHE_ENV = "DORAEMON_CACHE_DIR"
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class DistributionSketch:
    quantile_keys: np.ndarray

    @property
    def K(self) -> int:
        return int(self.quantile_keys.size)


def _as_training_set(pairs) -> TrainingSet:
    return pairs if isinstance(pairs, TrainingSet) else TrainingSet.from_pairs(pairs)


def analyze(pairs, K: int = DEFAULT_K) -> DistributionSketch:
    """Normalized keys at ``K`` evenly spaced normalized positions.

    Interpolates the inverse CDF of the training set, so a stretched set
    and a plain set over the same keys produce different sketches.
    """
    ts = _as_training_set(pairs)
    if K < 2:
        raise ValueError("K must be at least 2")
    if K > len(ts):
        raise ValueError("sample larger than population")
    keys = ts.keys.astype(np.float64)
    span = keys[-1] - keys[0]
    knorm = (keys - keys[0]) / span if span > 0 else np.zeros_like(keys)
    pos = ts.positions
    # duplicated keys share a position; keep the first of each run
    first = np.concatenate([[True], pos[1:] > pos[:-1]])
    pos, knorm = pos[first], knorm[first]
    targets = np.linspace(pos[0], pos[-1], K)
    return DistributionSketch(np.clip(np.interp(targets, pos, knorm), 0.0, 1.0))


def sketch_mse(a: DistributionSketch, b: DistributionSketch) -> float:
    if a.K != b.K:
        raise ValueError(f"sketch lengths differ ({a.K} vs {b.K})")
    d = a.quantile_keys - b.quantile_keys
    return float(np.dot(d, d)) / a.K


# -- cache --------------------------------------------------------------------


@dataclass
class CacheEntry:
    sketch: DistributionSketch
    arch: ModelArch
    M: int
    blob: Optional[bytes] = None
    created_at: float = field(default_factory=time.time)
    train_loss: float = float("nan")
    entry_id: str = field(default_factory=lambda: uuid.uuid4().hex[:16])
    path: Optional[Path] = None

    def load_index(self) -> StagedIndex:
        if self.blob is None:
            if self.path is None:
                raise ValueError(f"cache entry {self.entry_id} has no parameters")
            self.blob = self.path.read_bytes()
        index, _ = loads_index(self.blob)
        return index

    @classmethod
    def from_index(cls, sketch: DistributionSketch, index: StagedIndex) -> "CacheEntry":
        loss = getattr(index.root, "final_loss", float("nan"))
        return cls(sketch, index.arch, index.M, dumps_index(index, sketch.quantile_keys), train_loss=float(loss))


class ModelCache:
    """LRU map from sketches to trained indexes, optionally backed by a directory.

    Lookups may run concurrently; inserts and evictions take the lock.
    """

    def __init__(self, tau: float = DEFAULT_TAU, capacity: int = DEFAULT_CAPACITY, cache_dir=None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.tau = tau
        self.capacity = capacity
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.entries: "OrderedDict[str, CacheEntry]" = OrderedDict()
        self._lock = threading.RLock()
        self._pending: list[threading.Thread] = []
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            self._load_manifest()

    @classmethod
    def from_env(cls, cache_dir=None, **kw) -> "ModelCache":
        """An explicit ``cache_dir`` wins over ``$DORAEMON_CACHE_DIR``."""
        if cache_dir is None:
            cache_dir = os.environ.get(CACHE_ENV) or None
        return cls(cache_dir=cache_dir, **kw)

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        """Entry ids from least to most recently used."""
        return list(self.entries)

    def touch(self, entry_id: str) -> None:
        with self._lock:
            self.entries.move_to_end(entry_id)
            self._save_manifest()

    def insert(self, entry: CacheEntry) -> None:
        with self._lock:
            self.entries[entry.entry_id] = entry
            self.entries.move_to_end(entry.entry_id)
            if self.cache_dir is not None:
                entry.path = self.cache_dir / f"{entry.entry_id}.drmi"
                entry.path.write_bytes(entry.blob)
            while len(self.entries) > self.capacity:
                _, old = self.entries.popitem(last=False)
                if old.path is not None and old.path.exists():
                    old.path.unlink()
            self._save_manifest()

    def wait_background(self) -> None:
        for t in list(self._pending):
            t.join()
        self._pending.clear()

    def _save_manifest(self) -> None:
        if self.cache_dir is None:
            return
        doc = {
            "version": 1,
            "tau": self.tau,
            "capacity": self.capacity,
            "lru_order": list(self.entries),
            "entries": [
                {
                    "id": e.entry_id,
                    "file": f"{e.entry_id}.drmi",
                    "arch": e.arch.name,
                    "M": e.M,
                    "created_at": e.created_at,
                    "train_loss": None if math.isnan(e.train_loss) else e.train_loss,
                    "sketch": [float(v) for v in e.sketch.quantile_keys],
                }
                for e in self.entries.values()
            ],
        }
        tmp = self.cache_dir / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(doc, indent=1))
        tmp.replace(self.cache_dir / MANIFEST)

    def _load_manifest(self) -> None:
        path = self.cache_dir / MANIFEST
        if not path.exists():
            return
        doc = json.loads(path.read_text())
        by_id = {}
        for rec in doc.get("entries", []):
            file = self.cache_dir / rec["file"]
            if not file.exists():
                log.warning("cache entry %s is missing its parameter file; dropped", rec["id"])
                continue
            loss = rec.get("train_loss")
            by_id[rec["id"]] = CacheEntry(
                DistributionSketch(np.asarray(rec["sketch"], dtype=np.float64)),
                ModelArch.parse(rec["arch"]),
                int(rec["M"]),
                blob=None,
                created_at=float(rec["created_at"]),
                train_loss=float("nan") if loss is None else float(loss),
                entry_id=rec["id"],
                path=file,
            )
        for eid in doc.get("lru_order", list(by_id)):
            if eid in by_id:
                self.entries[eid] = by_id.pop(eid)
        self.entries.update(by_id)


def cache_lookup(cache: ModelCache, sketch: DistributionSketch):
    """Nearest entry by sketch MSE; a match within ``tau`` counts as a use."""
    best, best_mse = None, math.inf
    for entry in list(cache.entries.values()):
        if entry.sketch.K != sketch.K:
            continue
        d = sketch_mse(entry.sketch, sketch)
        if d < best_mse:
            best, best_mse = entry, d
    if best is not None and best_mse <= cache.tau:
        cache.touch(best.entry_id)
    return best, best_mse


def cache_insert(cache: ModelCache, entry: CacheEntry) -> ModelCache:
    cache.insert(entry)
    return cache


# -- auto-tuning ----------------------------------------------------------------


def default_search_space(M: int) -> list[tuple[ModelArch, int]]:
    return [(a, M) for a in DEFAULT_ARCHS]


@dataclass
class Candidate:
    arch: ModelArch
    M: int
    status: str = "ok"
    cost: float = math.inf
    search_term: float = math.nan
    compute_term: float = math.nan
    mean_width: float = math.nan
    weighted_width: Optional[float] = None
    train_seconds: float = 0.0
    error: str = ""

    def rank_key(self):
        return (round(self.cost, 12), self.arch.flops(), self.M)


@dataclass
class TuneResult:
    best_arch: ModelArch
    best_M: int
    index: StagedIndex
    table: list[Candidate]


def dataset_of(pairs) -> SortedDataset:
    """The distinct keys of a (possibly augmented) training set."""
    ts = _as_training_set(pairs)
    return SortedDataset(np.unique(ts.keys))


def auto_tune(
    pairs,
    search_space: Sequence[tuple[ModelArch, int]],
    cfg: TrainConfig,
    probe=None,
    compute_table: Optional[dict] = None,
    root_sample_cap: int = ROOT_SAMPLE_CAP,
    refit_leaves: bool = True,
) -> TuneResult:
    """Grid search: train, finalize and score every ``(arch, M)`` candidate.

    Candidates are finalized against the distinct keys of ``pairs`` before
    scoring, so the cost reflects the index that would actually be served.
    With ``refit_leaves=False`` the trained leaves are kept and only their
    error bounds are recomputed on the distinct keys.
    """
    if not search_space:
        raise ValueError("empty search space")
    ts = _as_training_set(pairs)
    data = dataset_of(ts)
    table: list[Candidate] = []
    built: dict[int, StagedIndex] = {}
    for i, (arch, M) in enumerate(search_space):
        cand = Candidate(arch, M)
        t0 = time.perf_counter()
        try:
            index = train_staged(ts, arch, M, cfg, root_sample_cap)
            index = finalize(index, data) if refit_leaves else compute_error_bounds(index, data)
        except TrainingDiverged as exc:
            cand.status, cand.error = "failed", str(exc)
            log.warning("candidate %s/M=%d failed: %s", arch.name, M, exc)
            table.append(cand)
            continue
        cand.train_seconds = time.perf_counter() - t0
        m = index_metrics(index, data, probe, compute_table)
        cand.cost, cand.search_term, cand.compute_term = m.cost, m.search_term, m.compute_term
        cand.mean_width, cand.weighted_width = m.mean_width, m.weighted_width
        built[i] = index
        table.append(cand)
    ok = [i for i, c in enumerate(table) if c.status == "ok"]
    if not ok:
        raise RuntimeError("every candidate in the search space failed to train")
    best = min(ok, key=lambda i: table[i].rank_key())
    return TuneResult(table[best].arch, table[best].M, built[best], table)


# -- advise -------------------------------------------------------------------------


def fine_tune_index(cached: StagedIndex, pairs, cfg: TrainConfig, root_sample_cap: int = ROOT_SAMPLE_CAP) -> StagedIndex:
    """Fine-tune the cached root on ``pairs``, then refit leaves and bounds."""
    ts = _as_training_set(pairs)
    x, y, *_ = root_training_data(ts, len(ts) if cached.arch.is_linear else root_sample_cap)
    root = fine_tune(cached.root, (x, y), cfg)
    index = train_staged(ts, cached.arch, cached.M, cfg, root=root)
    return finalize(index, dataset_of(ts))


def advise(
    cache: ModelCache,
    pairs,
    cfg: TrainConfig,
    search_space: Optional[Sequence[tuple[ModelArch, int]]] = None,
    probe=None,
    K: int = DEFAULT_K,
    compute_table: Optional[dict] = None,
    background: bool = False,
):
    """Return ``(index, provenance)`` for a training set.

    A cached model within ``cache.tau`` is fine-tuned; otherwise the search
    space is grid-searched and the winner cached. With ``background=True`` a
    hit also launches a full auto-tune whose result lands in the cache.
    """
    ts = _as_training_set(pairs)
    sketch = analyze(ts, K)
    if search_space is None:
        search_space = default_search_space(max(1, len(dataset_of(ts)) // 1000))
    entry, dist = cache_lookup(cache, sketch)
    if entry is not None and dist <= cache.tau:
        log.info("cache hit %s (mse %.3g); fine-tuning %s", entry.entry_id, dist, entry.arch.name)
        index = fine_tune_index(entry.load_index(), ts, cfg)
        if background:
            t = threading.Thread(
                target=_tune_and_insert, args=(cache, ts, search_space, cfg, probe, sketch, compute_table), daemon=True
            )
            cache._pending.append(t)
            t.start()
        return index, "fine_tuned"
    log.info("cache miss (nearest mse %.3g); auto-tuning %d candidates", dist, len(search_space))
    result = _tune_and_insert(cache, ts, search_space, cfg, probe, sketch, compute_table)
    return result.index, "auto_tuned"


def _tune_and_insert(cache, ts, search_space, cfg, probe, sketch, compute_table) -> TuneResult:
    result = auto_tune(ts, search_space, cfg, probe, compute_table)
    cache.insert(CacheEntry.from_index(sketch, result.index))
    return result


# -- shift detection -----------------------------------------------------------------


def detect_shift(recent_cost: float, baseline_cost: float, ratio: float = 1.5) -> bool:
    if baseline_cost <= 0:
        raise ValueError("baseline cost must be positive")
    return recent_cost > ratio * baseline_cost


def windowed_costs(index: StagedIndex, data: SortedDataset, queries, window: int, compute_table=None) -> np.ndarray:
    """Mean per-query cost proxy over consecutive windows of ``queries``.

    Queries for keys absent from ``data`` are charged the full-array search.
    """
    q = np.asarray(queries).astype(np.uint64, copy=False)
    _, _, lo, hi = index.leaf_arrays()
    widths = (hi - lo)[route_many(index, q)].astype(np.float64)
    present = np.isin(q, data.keys)
    widths = np.where(present, widths, float(max(data.N - 1, 1)))
    per_query = np.log2(np.maximum(2.0, widths + 1.0)) + compute_constant(index.arch, compute_table)
    n = q.size // window
    if n == 0:
        return np.empty(0)
    return per_query[: n * window].reshape(n, window).mean(axis=1)
