from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from learnidx.core_index import (
    COMPUTE_COST_TABLE,
    LeafModel,
    SortedDataset,
    StagedIndex,
    TrainingSet,
    compute_constant,
    compute_error_bounds,
    dumps_index,
    index_metrics,
    loads_index,
    lookup,
    lookup_many,
    round_half_up,
    route,
    route_many,
    train_staged,
)
from learnidx.models import DEFAULT_ARCHS, LIN, LinearModel, ModelArch, TrainConfig, fit_linear
from learnidx.workload import FrequencyHistogram, gen_dataset, preset_spec

FAST = TrainConfig(epochs=40, fine_tune_epochs=10)


def _index_with(root, M, keys, pos_span=None):
    keys = np.asarray(keys, dtype=np.uint64)
    leaves = [LeafModel(LinearModel(0.0, 0.0)) for _ in range(M)]
    return StagedIndex(root, leaves, keys.size, int(keys.min()), int(keys.max()), float(pos_span or keys.size), LIN)


# -- dataset types -----------------------------------------------------------------


def test_sorted_dataset_requires_strict_order():
    with pytest.raises(ValueError):
        SortedDataset([3, 2])
    with pytest.raises(ValueError):
        SortedDataset([1, 1])
    d = SortedDataset([1, 5, 9])
    assert d.N == 3 and list(d.training_set().positions) == [0, 1, 2]


def test_round_half_up():
    assert list(round_half_up([0.5, 1.5, -0.5, 2.49, -1.5])) == [1, 2, 0, 2, -1]


# -- routing -----------------------------------------------------------------------------


def test_route_single_leaf():
    idx = train_staged(TrainingSet(np.arange(10, dtype=np.uint64), np.arange(10.0)), LIN, 1, FAST)
    assert all(route(idx, k) == 0 for k in range(0, 20, 3))


def test_route_perfect_linear_root():
    keys = np.arange(100, dtype=np.uint64)
    idx = train_staged(TrainingSet(keys, np.arange(100.0)), LIN, 10, FAST)
    assert route(idx, 55) == 5
    # away from leaf edges every key lands in its decile
    mids = np.array([k for k in range(100) if k % 10 not in (0, 9)], dtype=np.uint64)
    assert np.array_equal(route_many(idx, mids), mids // 10)


def test_route_clamps_overshoot():
    keys = np.arange(100, dtype=np.uint64)
    # normalized root output (N + 10) / N
    idx = _index_with(LinearModel(0.0, 110 / 100), 10, keys)
    assert route(idx, 42) == 9
    idx = _index_with(LinearModel(0.0, -3.0), 10, keys)
    assert route(idx, 42) == 0


@given(st.floats(allow_nan=True, allow_infinity=True), st.floats(-1e6, 1e6), st.integers(1, 64))
@settings(max_examples=200, deadline=None)
def test_route_always_in_range(slope, intercept, M):
    keys = np.array([0, 7, 1000, 2**40], dtype=np.uint64)
    try:
        root = LinearModel(slope, intercept)
    except ValueError:
        return
    ids = route_many(_index_with(root, M, keys), keys)
    assert ids.min() >= 0 and ids.max() <= M - 1


# -- train_staged --------------------------------------------------------------------------------


def test_train_staged_identity():
    keys = np.arange(1000, dtype=np.uint64)
    idx = train_staged(TrainingSet(keys, np.arange(1000.0)), LIN, 1, FAST)
    assert idx.root.slope == pytest.approx(0.999)  # (N-1)/N in normalized space
    lf = idx.leaves[0]
    assert (lf.err_lo, lf.err_hi) == (0, 0)


def _kink_oracle(keys, positions, M):
    """Step-by-step simulation of the two-stage fit on a handful of pairs."""
    kmin, kmax = min(keys), max(keys)
    span = max(positions) + 1
    root = fit_linear([((k - kmin) / (kmax - kmin), p / span) for k, p in zip(keys, positions)])
    leaf_of = []
    for k in keys:
        f = root.slope * (k - kmin) / (kmax - kmin) + root.intercept
        leaf_of.append(min(M - 1, max(0, math.floor(M * f))))
    bounds = []
    for j in range(M):
        members = [(k, p) for k, p, l in zip(keys, positions, leaf_of) if l == j]
        if not members:
            bounds.append((0, 0))
            continue
        m = fit_linear(members)
        errs = [p - math.floor(m.slope * k + m.intercept + 0.5) for k, p in members]
        bounds.append((min(errs), max(errs)))
    return leaf_of, bounds


def test_train_staged_matches_hand_oracle_on_kink():
    keys = [0, 1, 2, 3, 40, 80, 120, 160]
    positions = list(range(8))
    idx = train_staged(TrainingSet(np.array(keys, dtype=np.uint64), np.array(positions, float)), LIN, 2, FAST)
    leaf_of, bounds = _kink_oracle(keys, positions, 2)
    assert list(route_many(idx, np.array(keys, dtype=np.uint64))) == leaf_of
    assert [(lf.err_lo, lf.err_hi) for lf in idx.leaves] == bounds
    # the kink must actually produce a nonzero bound somewhere
    assert any(b != (0, 0) for b in bounds)


def test_train_staged_desk_ratio():
    data = gen_dataset(preset_spec("D1", 200_000, seed=1))
    idx = train_staged(data.training_set(), LIN, 200, FAST)
    assert idx.M == 200 and data.N / idx.M == 1000
    assert sum(lf.key_count for lf in idx.leaves) == data.N


def test_train_staged_errors():
    with pytest.raises(ValueError):
        train_staged(TrainingSet(np.empty(0, dtype=np.uint64), np.empty(0)), LIN, 2, FAST)
    with pytest.raises(ValueError):
        train_staged(TrainingSet(np.arange(5, dtype=np.uint64), np.arange(5.0)), LIN, 0, FAST)


# -- compute_error_bounds ---------------------------------------------------------------------------


def test_bounds_perfect_predictor():
    data = SortedDataset(np.arange(0, 500, 5, dtype=np.uint64))
    idx = train_staged(data.training_set(), LIN, 4, FAST)
    idx = compute_error_bounds(idx, data)
    assert all((lf.err_lo, lf.err_hi) == (0, 0) for lf in idx.leaves)


def test_bounds_constant_offset():
    data = SortedDataset(np.arange(50, dtype=np.uint64))
    idx = _index_with(LinearModel(0.0, 0.0), 1, data.keys)
    idx = replace(idx, leaves=[LeafModel(LinearModel(1.0, 2.0))])
    idx = compute_error_bounds(idx, data)
    assert (idx.leaves[0].err_lo, idx.leaves[0].err_hi) == (-2, -2)


@pytest.mark.parametrize("seed", range(5))
def test_bounds_match_exhaustive_scan(seed):
    rng = np.random.default_rng(seed)
    keys = np.unique(rng.integers(0, 10_000, size=300)).astype(np.uint64)
    data = SortedDataset(keys)
    idx = train_staged(data.training_set(), LIN, 7, FAST)
    # perturb leaves so bounds are non-trivial
    leaves = [replace(lf, model=LinearModel(lf.model.slope * (1 + 0.1 * rng.standard_normal()), lf.model.intercept + rng.normal(0, 3))) for lf in idx.leaves]
    idx = compute_error_bounds(replace(idx, leaves=leaves), data)
    expect = {}
    for pos, k in enumerate(keys):
        j = route(idx, int(k))
        m = idx.leaves[j].model
        e = pos - math.floor(m.slope * float(k) + m.intercept + 0.5)
        lo, hi = expect.get(j, (e, e))
        expect[j] = (min(lo, e), max(hi, e))
    for j, lf in enumerate(idx.leaves):
        assert (lf.err_lo, lf.err_hi) == expect.get(j, (0, 0))


# -- lookup -----------------------------------------------------------------------------------------


@pytest.mark.parametrize("arch", DEFAULT_ARCHS, ids=lambda a: a.name)
def test_lookup_every_key_every_arch(arch):
    data = gen_dataset(preset_spec("D3", 5000, seed=2))
    idx = compute_error_bounds(train_staged(data.training_set(), arch, 20, FAST), data)
    assert np.array_equal(lookup_many(idx, data, data.keys), np.arange(data.N))
    for pos in range(0, data.N, 97):
        assert lookup(idx, data, int(data.keys[pos])) == pos


def test_lookup_absent_keys():
    data = SortedDataset(np.arange(100, 1000, 10, dtype=np.uint64))
    idx = compute_error_bounds(train_staged(data.training_set(), LIN, 3, FAST), data)
    assert lookup(idx, data, 5) is None
    assert lookup(idx, data, 105) is None
    assert lookup(idx, data, 5000) is None
    assert lookup(idx, data, -1) is None
    assert list(lookup_many(idx, data, [5, 105, 5000, 110])) == [-1, -1, -1, 1]


@pytest.mark.parametrize("arch", [LIN, ModelArch(1, 8)], ids=lambda a: a.name)
def test_lookup_agrees_with_binary_search(arch):
    data = gen_dataset(preset_spec("D1", 20_000, seed=4))
    idx = compute_error_bounds(train_staged(data.training_set(), arch, 20, FAST), data)
    rng = np.random.default_rng(0)
    probes = np.concatenate([rng.choice(data.keys, 5000), rng.integers(0, 10**9, 5000).astype(np.uint64)])
    got = lookup_many(idx, data, probes)
    pos = np.searchsorted(data.keys, probes)
    present = (pos < data.N) & (data.keys[np.minimum(pos, data.N - 1)] == probes)
    assert np.array_equal(got, np.where(present, pos, -1))


def test_bound_soundness():
    data = gen_dataset(preset_spec("D2", 10_000, seed=5))
    idx = train_staged(data.training_set(), ModelArch(1, 4), 10, FAST)
    leaf_ids = route_many(idx, data.keys)
    slopes, intercepts, lo, hi = idx.leaf_arrays()
    err = np.arange(data.N) - round_half_up(slopes[leaf_ids] * data.keys.astype(float) + intercepts[leaf_ids])
    assert np.all(err >= lo[leaf_ids]) and np.all(err <= hi[leaf_ids])


# -- metrics ------------------------------------------------------------------------------------------


def test_metrics_perfect_index():
    data = SortedDataset(np.arange(200, dtype=np.uint64))
    idx = compute_error_bounds(train_staged(data.training_set(), LIN, 4, FAST), data)
    m = index_metrics(idx, data)
    assert m.mean_width == 0.0
    # a zero-width window still costs the one probe that log2(max(2, w + 1)) charges
    assert m.search_term == 1.0
    assert m.cost == pytest.approx(compute_constant(LIN) + 1.0)


def test_metrics_weighted_vs_unweighted_toy():
    data = SortedDataset(np.arange(20, dtype=np.uint64))
    idx = _index_with(LinearModel(1.0, 0.0), 2, data.keys, pos_span=20)
    # normalized root x = k / 19: keys 0..9 -> leaf 0, keys 10..19 -> leaf 1
    idx = replace(idx, root=LinearModel(1.0, 0.0))
    idx = replace(idx, leaves=[LeafModel(LinearModel(1.0, 0.0), 0, 0, 10), LeafModel(LinearModel(1.0, 0.0), -3, 4, 10)])
    counts = np.zeros(20, dtype=np.int64)
    counts[:10] = 95
    counts[10:] = 5
    m = index_metrics(idx, data, FrequencyHistogram.from_counts(counts))
    assert m.mean_width == pytest.approx(3.5)
    assert m.weighted_width == pytest.approx(0.05 * 7)
    assert m.search_term == pytest.approx(0.95 * 1 + 0.05 * 3)


def test_compute_constants_increase_with_size():
    names = ["LIN", "NN4", "NN8", "NN16"]
    vals = [COMPUTE_COST_TABLE[n] for n in names]
    assert vals == sorted(vals) and len(set(vals)) == 4
    assert compute_constant(ModelArch(1, 32)) == pytest.approx(0.25 + ModelArch(1, 32).flops() / 32)


# -- serialization --------------------------------------------------------------------------------------


@pytest.mark.parametrize("arch", [LIN, ModelArch(1, 8), ModelArch(2, 4)], ids=lambda a: a.name)
def test_serialization_roundtrip(arch):
    data = gen_dataset(preset_spec("D4", 3000, seed=6))
    idx = compute_error_bounds(train_staged(data.training_set(), arch, 9, FAST), data)
    sketch = np.linspace(0, 1, 5)
    again, sk = loads_index(dumps_index(idx, sketch))
    assert np.array_equal(sk, sketch)
    assert again.arch == arch and again.M == idx.M and again.N == idx.N
    assert np.array_equal(lookup_many(again, data, data.keys), np.arange(data.N))
    for a, b in zip(idx.leaf_arrays(), again.leaf_arrays()):
        assert np.array_equal(a, b)


def test_loads_rejects_garbage():
    with pytest.raises(ValueError):
        loads_index(b"nope")
    with pytest.raises(ValueError):
        loads_index(b"XXXX" + bytes(40))
