"""Synthetic key sets, query workloads and access-frequency histograms."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Optional, Union

import numpy as np

from .core_index import SortedDataset

log = logging.getLogger(__name__)

DEFAULT_KEY_SPACE = 10**9
MAX_KEY_SPACE = 2**63 - 1


# -- distributions on [0, 1] --------------------------------------------------


@dataclass(frozen=True)
class Uniform:
    lo: float = 0.0
    hi: float = 1.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=n)

    def cdf(self, u):
        u = np.asarray(u, dtype=np.float64)
        return np.clip((u - self.lo) / (self.hi - self.lo), 0.0, 1.0)


@dataclass(frozen=True)
class LogNormal:
    """Lognormal truncated at its ``trunc`` quantile and rescaled onto ``[lo, hi]``."""

    mu: float = 0.0
    sigma: float = 1.0
    lo: float = 0.0
    hi: float = 1.0
    trunc: float = 0.999

    @property
    def cap(self) -> float:
        return math.exp(self.mu + self.sigma * NormalDist().inv_cdf(self.trunc))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        cap = self.cap
        out = np.empty(0)
        while out.size < n:
            z = rng.lognormal(self.mu, self.sigma, size=max(n - out.size, 16) * 2)
            out = np.concatenate([out, z[z <= cap]])
        return self.lo + (self.hi - self.lo) * out[:n] / cap

    def cdf(self, u):
        from scipy.stats import lognorm

        u = np.asarray(u, dtype=np.float64)
        z = np.clip((u - self.lo) / (self.hi - self.lo), 0.0, 1.0) * self.cap
        base = lognorm.cdf(z, s=self.sigma, scale=math.exp(self.mu))
        return np.clip(base / self.trunc, 0.0, 1.0)


@dataclass(frozen=True)
class Mixture:
    components: tuple  # of (weight, Uniform | LogNormal)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        weights = np.array([w for w, _ in self.components], dtype=np.float64)
        which = rng.choice(len(weights), size=n, p=weights / weights.sum())
        out = np.empty(n)
        for i, (_, comp) in enumerate(self.components):
            mask = which == i
            out[mask] = comp.sample(rng, int(mask.sum()))
        return out

    def cdf(self, u):
        weights = np.array([w for w, _ in self.components], dtype=np.float64)
        weights = weights / weights.sum()
        return sum(w * c.cdf(u) for w, (_, c) in zip(weights, self.components))


@dataclass(frozen=True)
class Piecewise:
    """Piecewise-linear CDF through ``(u, F(u))`` breakpoints."""

    breakpoints: tuple

    def __post_init__(self):
        us = [b[0] for b in self.breakpoints]
        fs = [b[1] for b in self.breakpoints]
        if us[0] != 0.0 or us[-1] != 1.0 or fs[0] != 0.0 or fs[-1] != 1.0:
            raise ValueError("breakpoints must run from (0, 0) to (1, 1)")
        if any(b <= a for a, b in zip(us, us[1:])) or any(b < a for a, b in zip(fs, fs[1:])):
            raise ValueError("breakpoints must be increasing")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        us = np.array([b[0] for b in self.breakpoints])
        fs = np.array([b[1] for b in self.breakpoints])
        return np.interp(rng.random(n), fs, us)

    def cdf(self, u):
        us = np.array([b[0] for b in self.breakpoints])
        fs = np.array([b[1] for b in self.breakpoints])
        return np.interp(np.asarray(u, dtype=np.float64), us, fs)


Family = Union[Uniform, LogNormal, Mixture, Piecewise]


@dataclass(frozen=True)
class DatasetSpec:
    family: Family
    N: int
    key_space_max: int = DEFAULT_KEY_SPACE
    seed: int = 0


# Desk-scale stand-ins for four differently shaped datasets.
PRESETS: dict[str, Family] = {
    "D1": LogNormal(0.0, 1.0),
    "D2": Mixture(((0.6, LogNormal(0.0, 0.5, 0.0, 0.45)), (0.4, LogNormal(0.0, 0.8, 0.45, 1.0)))),
    "D3": Mixture(
        (
            (0.40, Uniform(0.0, 0.15)),
            (0.35, LogNormal(0.0, 0.6, 0.5, 0.75)),
            (0.25, Uniform(0.85, 1.0)),
        )
    ),
    "D4": Piecewise(((0.0, 0.0), (0.6, 0.45), (0.61, 0.7), (1.0, 1.0))),
}


def preset_spec(name: str, N: int, seed: int = 0, key_space_max: int = DEFAULT_KEY_SPACE) -> DatasetSpec:
    try:
        family = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return DatasetSpec(family, N, key_space_max, seed)


def _make_distinct(keys: np.ndarray, key_space_max: int) -> np.ndarray:
    """Push colliding sorted keys up to the next free integer, then back under the cap."""
    idx = np.arange(keys.size, dtype=np.int64)
    out = np.maximum.accumulate(keys - idx) + idx
    ceiling = key_space_max - (keys.size - 1 - idx)
    return np.minimum(out, ceiling)


def gen_dataset(spec: DatasetSpec) -> SortedDataset:
    if spec.N < 1:
        raise ValueError("N must be at least 1")
    if spec.key_space_max > MAX_KEY_SPACE:
        raise ValueError("key_space_max must fit in a signed 64-bit integer")
    if spec.N > spec.key_space_max:
        raise ValueError("key space exhausted")
    rng = np.random.default_rng(spec.seed)
    u = np.clip(spec.family.sample(rng, spec.N), 0.0, 1.0)
    keys = np.floor(u * spec.key_space_max).astype(np.int64)
    keys.sort()
    keys = _make_distinct(keys, spec.key_space_max)
    return SortedDataset(keys.astype(np.uint64))


# -- workloads -----------------------------------------------------------------


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = "uniform"  # "uniform" | "skewed"
    num_queries: int = 0
    seed: int = 0
    hot_fraction: float = 0.05
    hot_prob: float = 0.95
    hot_range_start: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "skewed"):
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.num_queries < 0:
            raise ValueError("num_queries must be non-negative")
        if self.kind == "skewed":
            if not (0 < self.hot_fraction < 1 and 0 < self.hot_prob < 1):
                raise ValueError("hot_fraction and hot_prob must lie in (0, 1)")
            if not 0 <= self.hot_range_start <= 1:
                raise ValueError("hot_range_start must lie in [0, 1]")


def hot_range(spec: WorkloadSpec, N: int) -> tuple[int, int]:
    """Half-open rank range ``[start, stop)`` of the hot keys."""
    count = min(N, math.ceil(spec.hot_fraction * N))
    start = min(math.floor(spec.hot_range_start * N), N - count)
    return start, start + count


def gen_workload_ranks(spec: WorkloadSpec, N: int) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    n = spec.num_queries
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if spec.kind == "uniform":
        return rng.integers(0, N, size=n)
    start, stop = hot_range(spec, N)
    hot_count = stop - start
    cold_count = N - hot_count
    is_hot = rng.random(n) < spec.hot_prob
    if cold_count == 0:
        is_hot[:] = True
    hot = start + rng.integers(0, hot_count, size=n)
    cold = rng.integers(0, max(cold_count, 1), size=n)
    cold = np.where(cold < start, cold, cold + hot_count)
    return np.where(is_hot, hot, cold)


def gen_workload(spec: WorkloadSpec, data: SortedDataset) -> np.ndarray:
    if data.N == 0:
        raise ValueError("dataset is empty")
    return data.keys[gen_workload_ranks(spec, data.N)]


@dataclass
class FrequencyHistogram:
    counts: np.ndarray
    total: int
    ignored: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        if int(self.counts.sum()) != self.total:
            raise ValueError("counts must sum to total")

    @classmethod
    def from_counts(cls, counts) -> "FrequencyHistogram":
        counts = np.asarray(counts, dtype=np.int64)
        return cls(counts, int(counts.sum()))

    def mass(self, start: int, stop: int) -> float:
        return float(self.counts[start:stop].sum()) / self.total if self.total else 0.0


def extract_frequencies(workload, data: SortedDataset, sample_rate: float = 1.0, seed: int = 0) -> FrequencyHistogram:
    """Access counts over a Bernoulli(``sample_rate``) subsample of ``workload``."""
    if not 0 < sample_rate <= 1:
        raise ValueError("sample_rate must lie in (0, 1]")
    q = np.asarray(workload).astype(np.uint64, copy=False)
    if sample_rate < 1:
        rng = np.random.default_rng(seed)
        q = q[rng.random(q.size) < sample_rate]
    counts = np.zeros(data.N, dtype=np.int64)
    if q.size == 0 or data.N == 0:
        return FrequencyHistogram(counts, 0, 0)
    pos = np.searchsorted(data.keys, q)
    inside = pos < data.N
    match = np.zeros(q.size, dtype=bool)
    match[inside] = data.keys[pos[inside]] == q[inside]
    ignored = int(q.size - match.sum())
    if ignored:
        log.info("ignored %d sampled queries for keys outside the dataset", ignored)
    counts += np.bincount(pos[match], minlength=data.N)
    return FrequencyHistogram(counts, int(match.sum()), ignored)


# -- file formats ----------------------------------------------------------------


def write_keys(path, keys, text: bool = False) -> None:
    """Little-endian uint64 with no header; ``text=True`` writes one decimal per line."""
    keys = np.asarray(keys).astype(np.uint64, copy=False)
    path = Path(path)
    if text:
        path.write_text("".join(f"{int(k)}\n" for k in keys))
    else:
        path.write_bytes(keys.astype("<u8").tobytes())


def read_keys(path, text: Optional[bool] = None) -> np.ndarray:
    path = Path(path)
    if text is None:
        text = path.suffix == ".txt"
    if text:
        lines = path.read_text().split()
        return np.array([int(x) for x in lines], dtype=np.uint64)
    raw = path.read_bytes()
    if len(raw) % 8:
        raise ValueError(f"{path}: size is not a multiple of 8 bytes")
    return np.frombuffer(raw, dtype="<u8").astype(np.uint64)


def load_dataset(path) -> SortedDataset:
    return SortedDataset(read_keys(path))
