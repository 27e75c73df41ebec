"""Experiment drivers behind the CLI: architecture grid, augmentation A/B, shift-and-reuse."""

from __future__ import annotations

import bisect
import logging
import math
import tempfile
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .augment import DEFAULT_CAP, compute_weights, duplicate_augment, stretch
from .core_index import (
    COMPUTE_COST_TABLE,
    SortedDataset,
    StagedIndex,
    compute_error_bounds,
    index_metrics,
    lookup,
    lookup_many,
    train_staged,
)
from .counselor import (
    DEFAULT_K,
    DEFAULT_TAU,
    ModelCache,
    advise,
    analyze,
    auto_tune,
    detect_shift,
    sketch_mse,
    windowed_costs,
)
from .models import DEFAULT_ARCHS, TrainConfig
from .workload import (
    PRESETS,
    DatasetSpec,
    WorkloadSpec,
    extract_frequencies,
    gen_dataset,
    gen_workload,
    preset_spec,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DESK_N = 200_000
DESK_M = 200
DESK_QUERIES = 1_000_000

# Hot-range placements (fraction of key rank) for the three skewed workloads.
SKEWED_STARTS = {"skewed1": 0.1, "skewed2": 0.45, "skewed3": 0.8}
WORKLOADS = ("skewed1", "skewed2", "skewed3", "uniform")


class ExactnessError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    presets: tuple = tuple(PRESETS)
    workloads: tuple = WORKLOADS
    N: int = DESK_N
    num_queries: int = DESK_QUERIES
    search_space: list = field(default_factory=lambda: [(a, DESK_M) for a in DEFAULT_ARCHS])
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 1
    mode: str = "deterministic"
    sample_rate: float = 1.0
    cap: float = DEFAULT_CAP
    K: int = DEFAULT_K
    tau: float = DEFAULT_TAU
    cache_dir: Optional[str] = None
    latency_queries: int = 100_000
    range_buckets: int = 20

    def __post_init__(self):
        if self.mode not in ("deterministic", "calibrated"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def deterministic(self) -> bool:
        return self.mode == "deterministic"


def workload_spec(name: str, num_queries: int, seed: int) -> WorkloadSpec:
    if name == "uniform":
        return WorkloadSpec("uniform", num_queries, seed)
    if name in SKEWED_STARTS:
        return WorkloadSpec("skewed", num_queries, seed, 0.05, 0.95, SKEWED_STARTS[name])
    raise ValueError(f"unknown workload {name!r}")


# -- calibration and timing ----------------------------------------------------------


def calibrate_compute_costs(archs, n: int = 1_000_000, seed: int = 0) -> dict:
    """Forward-pass cost of each arch in units of one vectorized search probe.

    Times ``n`` forward evaluations per architecture and ``n`` probes of a
    bisection step over a sorted array of the same length.
    """
    from .models import LinearModel, init_nn

    rng = np.random.default_rng(seed)
    x = rng.random(n)
    arr = np.sort(rng.integers(0, 2**40, size=n).astype(np.uint64))
    probes = rng.integers(0, n, size=n)
    targets = arr[probes]
    t0 = time.perf_counter()
    for _ in range(3):
        _ = arr[probes] < targets
    probe_cost = (time.perf_counter() - t0) / 3
    table = {}
    for arch in archs:
        model = LinearModel(1.0, 0.0) if arch.is_linear else init_nn(arch, seed)
        t0 = time.perf_counter()
        for _ in range(3):
            model.predict(x)
        table[arch.name] = ((time.perf_counter() - t0) / 3) / probe_cost
    return table


def measure_latency(index: StagedIndex, data: SortedDataset, queries, limit: int) -> tuple[float, float]:
    """Mean and p99 wall time (ns) of single-key lookups after a warm-up pass."""
    q = [int(k) for k in np.asarray(queries)[:limit]]
    for k in q[: min(1000, len(q))]:
        lookup(index, data, k)
    samples = np.empty(len(q))
    clock = time.perf_counter_ns
    for i, k in enumerate(q):
        t0 = clock()
        lookup(index, data, k)
        samples[i] = clock() - t0
    return float(samples.mean()), float(np.percentile(samples, 99))


def measure_baseline_latency(kind: str, data: SortedDataset, queries, limit: int) -> tuple[float, float]:
    q = [int(k) for k in np.asarray(queries)[:limit]]
    if kind == "binary_search":
        keys = [int(k) for k in data.keys]

        def find(k):
            i = bisect.bisect_left(keys, k)
            return i if i < len(keys) and keys[i] == k else None

    else:
        from sortedcontainers import SortedDict

        sd = SortedDict((int(k), i) for i, k in enumerate(data.keys))
        find = sd.get
    samples = np.empty(len(q))
    clock = time.perf_counter_ns
    for i, k in enumerate(q):
        t0 = clock()
        find(k)
        samples[i] = clock() - t0
    return float(samples.mean()), float(np.percentile(samples, 99))


def exactness(index: StagedIndex, data: SortedDataset) -> float:
    found = lookup_many(index, data, data.keys)
    return float(np.mean(found == np.arange(data.N)))


def check_exact(index: StagedIndex, data: SortedDataset, where: str) -> float:
    ex = exactness(index, data)
    if ex != 1.0:
        raise ExactnessError(f"{where}: only {ex:.6f} of keys found at their exact position")
    return ex


# -- report rows ---------------------------------------------------------------------------

ROW_FIELDS = [
    "schema_version",
    "dataset",
    "workload",
    "variant",
    "arch",
    "M",
    "cost_proxy",
    "search_term",
    "compute_term",
    "latency_mean_ns",
    "latency_p99_ns",
    "mean_bound_width",
    "weighted_bound_width",
    "build_seconds",
    "exactness",
]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return f"{v:.6f}"
    return v


def make_row(**kw) -> dict:
    row = {f: None for f in ROW_FIELDS}
    row["schema_version"] = SCHEMA_VERSION
    row.update(kw)
    return {k: _fmt(v) for k, v in row.items()}


def _compute_table(cfg: ExperimentConfig) -> Optional[dict]:
    if cfg.deterministic:
        return None
    archs = {a for a, _ in cfg.search_space}
    table = dict(COMPUTE_COST_TABLE)
    table.update(calibrate_compute_costs(sorted(archs, key=lambda a: a.flops())))
    return table


# -- architecture grid -----------------------------------------------------------------------


def run_grid(cfg: ExperimentConfig, datasets: Optional[dict] = None, workloads: Optional[dict] = None) -> dict:
    """Score every (dataset, workload, arch, M) cell.

    Returns a dict of tables: ``rows``, ``best``, ``decomposition`` and
    ``ranges``. ``datasets`` / ``workloads`` override the generated inputs
    (``workloads`` maps dataset id to ``{workload id: query keys}``).
    """
    compute_table = _compute_table(cfg)
    if datasets is None:
        datasets = {p: gen_dataset(preset_spec(p, cfg.N, cfg.seed)) for p in cfg.presets}
    rows, best_rows, decomp, ranges = [], [], [], []
    for d_id, data in datasets.items():
        if workloads is not None and d_id in workloads:
            wls = workloads[d_id]
        else:
            wls = {
                w: gen_workload(workload_spec(w, cfg.num_queries, cfg.seed + 100 + i), data)
                for i, w in enumerate(cfg.workloads)
            }
        hists = {w: extract_frequencies(q, data, cfg.sample_rate, seed=cfg.seed) for w, q in wls.items()}

        built = []
        for arch, M in cfg.search_space:
            t0 = time.perf_counter()
            index = train_staged(data.training_set(), arch, M, cfg.train)
            build = time.perf_counter() - t0
            check_exact(index, data, f"grid {d_id}/{arch.name}/M={M}")
            built.append((arch, M, index, build))

            plain = index_metrics(index, data, None, compute_table)
            decomp.append(
                {
                    "schema_version": SCHEMA_VERSION,
                    "dataset": d_id,
                    "arch": arch.name,
                    "M": M,
                    "compute_term": _fmt(plain.compute_term),
                    "search_term": _fmt(plain.search_term),
                    "cost_proxy": _fmt(plain.cost),
                    "mean_bound_width": _fmt(plain.mean_width),
                }
            )
            edges = np.linspace(0, data.N, cfg.range_buckets + 1).astype(int)
            for b in range(cfg.range_buckets):
                lo, hi = edges[b], edges[b + 1]
                ranges.append(
                    {
                        "schema_version": SCHEMA_VERSION,
                        "dataset": d_id,
                        "arch": arch.name,
                        "M": M,
                        "bucket": b,
                        "key_lo": int(data.keys[lo]),
                        "key_hi": int(data.keys[hi - 1]),
                        "mean_bound_width": _fmt(float(plain.key_widths[lo:hi].mean())),
                    }
                )

        for w_id, hist in hists.items():
            cells = []
            for arch, M, index, build in built:
                m = index_metrics(index, data, hist, compute_table)
                lat = (None, None)
                if not cfg.deterministic:
                    lat = measure_latency(index, data, wls[w_id], cfg.latency_queries)
                rows.append(
                    make_row(
                        dataset=d_id,
                        workload=w_id,
                        variant="none",
                        arch=arch.name,
                        M=M,
                        cost_proxy=m.cost,
                        search_term=m.search_term,
                        compute_term=m.compute_term,
                        latency_mean_ns=lat[0],
                        latency_p99_ns=lat[1],
                        mean_bound_width=m.mean_width,
                        weighted_bound_width=m.weighted_width,
                        build_seconds=None if cfg.deterministic else build,
                        exactness=1.0,
                    )
                )
                cells.append(((round(m.cost, 12), arch.flops(), M), arch.name, M, m.cost))
            best = min(cells)
            best_rows.append(
                {
                    "schema_version": SCHEMA_VERSION,
                    "dataset": d_id,
                    "workload": w_id,
                    "best_arch": best[1],
                    "best_M": best[2],
                    "cost_proxy": _fmt(best[3]),
                }
            )
            for kind in ("binary_search", "ordered_map"):
                lat = (None, None)
                if not cfg.deterministic:
                    lat = measure_baseline_latency(kind, data, wls[w_id], cfg.latency_queries)
                steps = math.log2(max(2, data.N))
                rows.append(
                    make_row(
                        dataset=d_id,
                        workload=w_id,
                        variant="baseline",
                        arch=kind,
                        M=0,
                        cost_proxy=steps,
                        search_term=steps,
                        compute_term=0.0,
                        latency_mean_ns=lat[0],
                        latency_p99_ns=lat[1],
                        exactness=1.0,
                    )
                )
    return {"rows": rows, "best": best_rows, "decomposition": decomp, "ranges": ranges}


# -- augmentation A/B ------------------------------------------------------------------------


def run_augment_ab(cfg: ExperimentConfig, preset: str = "D1", workload: str = "skewed3", data=None, queries=None) -> dict:
    """Auto-tune the same dataset under no augmentation, duplication and stretching."""
    compute_table = _compute_table(cfg)
    if data is None:
        data = gen_dataset(preset_spec(preset, cfg.N, cfg.seed))
    if queries is None:
        queries = gen_workload(workload_spec(workload, cfg.num_queries, cfg.seed + 100), data)
    hist = extract_frequencies(queries, data, cfg.sample_rate, seed=cfg.seed)
    weights = compute_weights(hist, cfg.cap)
    variants = {
        "none": data.training_set(),
        "duplicate": duplicate_augment(data, hist, cfg.cap),
        "stretch": stretch(data, weights),
    }
    rows, tables = [], {}
    for name, ts in variants.items():
        t0 = time.perf_counter()
        # duplication keeps its frequency-weighted leaves; only stretching needs the finalizer
        result = auto_tune(ts, cfg.search_space, cfg.train, hist, compute_table, refit_leaves=name != "duplicate")
        index = result.index
        build = time.perf_counter() - t0
        ex = check_exact(index, data, f"augment-ab {name}")
        m = index_metrics(index, data, hist, compute_table)
        lat = (None, None)
        if not cfg.deterministic:
            lat = measure_latency(index, data, queries, cfg.latency_queries)
        rows.append(
            make_row(
                dataset=preset,
                workload=workload,
                variant=name,
                arch=result.best_arch.name,
                M=result.best_M,
                cost_proxy=m.cost,
                search_term=m.search_term,
                compute_term=m.compute_term,
                latency_mean_ns=lat[0],
                latency_p99_ns=lat[1],
                mean_bound_width=m.mean_width,
                weighted_bound_width=m.weighted_width,
                build_seconds=None if cfg.deterministic else build,
                exactness=ex,
            )
        )
        tables[name] = result.table
    return {"rows": rows, "candidates": tables}


# -- shift and reuse ---------------------------------------------------------------------------


def churn(data: SortedDataset, spec: DatasetSpec, fraction: float, seed: int) -> SortedDataset:
    """Replace ``fraction`` of the keys with fresh draws from the same generator."""
    rng = np.random.default_rng(seed)
    n_drop = int(round(fraction * data.N))
    keep = np.ones(data.N, dtype=bool)
    keep[rng.choice(data.N, size=n_drop, replace=False)] = False
    fresh = gen_dataset(replace(spec, N=data.N, seed=seed)).keys
    fresh = fresh[~np.isin(fresh, data.keys)]
    fresh = rng.choice(fresh, size=min(n_drop, fresh.size), replace=False)
    return SortedDataset(np.unique(np.concatenate([data.keys[keep], fresh])))


@dataclass
class ShiftReport:
    cold_seconds: float
    warm_seconds: float
    provenance: str
    sketch_mse: float
    shift_detected: bool
    baseline_cost: float
    recent_cost: float
    exactness: float
    cold_arch: str
    warm_arch: str

    @property
    def ratio(self) -> float:
        return self.warm_seconds / self.cold_seconds if self.cold_seconds > 0 else math.inf


def run_shift(cfg: ExperimentConfig, preset: str = "D1", swap_to: Optional[str] = None, window: int = 10_000) -> ShiftReport:
    """Cold build on A, swap to A' (or another preset), detect, rebuild from the cache."""
    spec = preset_spec(preset, cfg.N, cfg.seed)
    data_a = gen_dataset(spec)
    if swap_to is None:
        data_b = churn(data_a, spec, 0.05, cfg.seed + 7)
    else:
        data_b = gen_dataset(preset_spec(swap_to, cfg.N, cfg.seed + 7))
    compute_table = _compute_table(cfg)

    tmp = None
    cache_dir = cfg.cache_dir
    if cache_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="learnidx-cache-")
        cache_dir = tmp.name
    try:
        cache = ModelCache(tau=cfg.tau, cache_dir=cache_dir)
        t0 = time.perf_counter()
        index_a, prov_a = advise(cache, data_a.training_set(), cfg.train, cfg.search_space, K=cfg.K, compute_table=compute_table)
        cold = time.perf_counter() - t0
        check_exact(index_a, data_a, "shift cold build")

        q_a = gen_workload(WorkloadSpec("uniform", 5 * window, cfg.seed + 11), data_a)
        q_b = gen_workload(WorkloadSpec("uniform", 5 * window, cfg.seed + 12), data_b)
        baseline = float(windowed_costs(index_a, data_a, q_a, window, compute_table).mean())
        stale = compute_error_bounds(index_a, data_b)
        recent = float(windowed_costs(stale, data_b, q_b, window, compute_table)[0])
        shifted = detect_shift(recent, baseline)

        t0 = time.perf_counter()
        index_b, prov_b = advise(cache, data_b.training_set(), cfg.train, cfg.search_space, K=cfg.K, compute_table=compute_table)
        warm = time.perf_counter() - t0
        ex = check_exact(index_b, data_b, "shift warm rebuild")
        d = sketch_mse(analyze(data_a.training_set(), cfg.K), analyze(data_b.training_set(), cfg.K))
        return ShiftReport(cold, warm, prov_b, d, shifted, baseline, recent, ex, index_a.arch.name, index_b.arch.name)
    finally:
        if tmp is not None:
            tmp.cleanup()
