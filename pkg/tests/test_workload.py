from __future__ import annotations

import numpy as np
import pytest

from learnidx.core_index import SortedDataset
from learnidx.workload import (
    PRESETS,
    DatasetSpec,
    FrequencyHistogram,
    LogNormal,
    Uniform,
    WorkloadSpec,
    extract_frequencies,
    gen_dataset,
    gen_workload,
    hot_range,
    load_dataset,
    preset_spec,
    read_keys,
    write_keys,
)

# -- datasets --------------------------------------------------------------------


def test_uniform_dataset_deterministic():
    spec = DatasetSpec(Uniform(), 100, 10**6, seed=7)
    a, b = gen_dataset(spec), gen_dataset(spec)
    assert a.N == 100
    assert np.all(np.diff(a.keys.astype(np.int64)) > 0)
    assert np.array_equal(a.keys, b.keys)
    assert not np.array_equal(a.keys, gen_dataset(DatasetSpec(Uniform(), 100, 10**6, seed=8)).keys)


def test_lognormal_matches_analytic_cdf():
    fam = LogNormal(0.0, 1.0)
    kmax = 10**12
    data = gen_dataset(DatasetSpec(fam, 100_000, kmax, seed=3))
    u = data.keys.astype(np.float64) / kmax
    ecdf_hi = np.arange(1, data.N + 1) / data.N
    ecdf_lo = np.arange(data.N) / data.N
    F = fam.cdf(u)
    ks = max(np.max(ecdf_hi - F), np.max(F - ecdf_lo))
    assert ks < 0.01


def test_lognormal_rank_curve_concave_then_convex():
    data = gen_dataset(preset_spec("D1", 100_000, seed=3))
    q = data.keys[np.linspace(0, data.N - 1, 41).astype(int)].astype(np.float64)
    second = np.diff(q, 2)
    # key as a function of rank: flattening early (concave), steepening late (convex)
    assert np.all(second[-10:] > 0)
    assert second[0] < second[-1]
    slopes = np.diff(q)
    assert slopes.argmin() not in (0, slopes.size - 1)


def test_key_space_exhausted():
    with pytest.raises(ValueError, match="key space exhausted"):
        gen_dataset(DatasetSpec(Uniform(), 11, key_space_max=10))
    d = gen_dataset(DatasetSpec(Uniform(), 10, key_space_max=10))
    assert d.N == 10 and int(d.keys.max()) <= 10


def test_dense_key_space_stays_distinct():
    d = gen_dataset(DatasetSpec(LogNormal(), 5000, key_space_max=6000, seed=1))
    assert d.N == 5000 and int(d.keys.max()) <= 6000


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_generate(name):
    d = gen_dataset(preset_spec(name, 2000, seed=1))
    assert d.N == 2000


def test_unknown_preset():
    with pytest.raises(ValueError):
        preset_spec("D9", 10)


# -- workloads ----------------------------------------------------------------------------


def test_skewed_hot_mass_calibrated():
    data = gen_dataset(DatasetSpec(Uniform(), 100_000, 10**9, seed=1))
    spec = WorkloadSpec("skewed", 1_000_000, seed=5, hot_fraction=0.05, hot_prob=0.95, hot_range_start=0.0)
    q = gen_workload(spec, data)
    start, stop = hot_range(spec, data.N)
    assert (start, stop) == (0, 5000)
    lo, hi = data.keys[start], data.keys[stop - 1]
    frac = np.mean((q >= lo) & (q <= hi))
    assert 0.949 <= frac <= 0.951


def test_uniform_workload_binomial_bounds():
    data = SortedDataset(np.arange(1000, dtype=np.uint64) * 3)
    q = gen_workload(WorkloadSpec("uniform", 1_000_000, seed=2), data)
    counts = extract_frequencies(q, data).counts
    expected = 1000
    assert np.all(np.abs(counts - expected) <= 5 * np.sqrt(expected))


def test_zero_queries():
    data = SortedDataset([1, 2, 3])
    assert gen_workload(WorkloadSpec("uniform", 0), data).size == 0


def test_hot_range_placement():
    spec = WorkloadSpec("skewed", 10, hot_fraction=0.05, hot_range_start=1.0)
    assert hot_range(spec, 1000) == (950, 1000)


@pytest.mark.parametrize(
    "kw", [dict(kind="zipf"), dict(kind="skewed", hot_fraction=0.0), dict(kind="skewed", hot_prob=1.0), dict(num_queries=-1)]
)
def test_workload_spec_validation(kw):
    with pytest.raises(ValueError):
        WorkloadSpec(**kw)


# -- frequencies -----------------------------------------------------------------------------


def test_extract_frequencies_one_two_one():
    data = SortedDataset([10, 20, 30])
    h = extract_frequencies([10, 20, 20, 30], data)
    assert list(h.counts) == [1, 2, 1] and h.total == 4


def test_extract_frequencies_empty():
    h = extract_frequencies([], SortedDataset([1, 2]))
    assert list(h.counts) == [0, 0] and h.total == 0


def test_extract_frequencies_ignores_unknown_keys():
    h = extract_frequencies([1, 5, 2, 99], SortedDataset([1, 2]))
    assert list(h.counts) == [1, 1] and h.ignored == 2


def test_sampled_hot_mass():
    data = gen_dataset(DatasetSpec(Uniform(), 20_000, 10**9, seed=1))
    spec = WorkloadSpec("skewed", 1_000_000, seed=9, hot_range_start=0.3)
    q = gen_workload(spec, data)
    h = extract_frequencies(q, data, sample_rate=0.1, seed=4)
    assert 0.08 * 1e6 < h.total < 0.12 * 1e6
    assert abs(h.mass(*hot_range(spec, data.N)) - 0.95) <= 0.01


def test_histogram_validation():
    with pytest.raises(ValueError):
        FrequencyHistogram(np.array([1, -1]), 0)
    with pytest.raises(ValueError):
        FrequencyHistogram(np.array([1, 1]), 3)


# -- files ----------------------------------------------------------------------------------------


@pytest.mark.parametrize("text", [False, True])
def test_key_file_roundtrip(tmp_path, text):
    keys = np.array([0, 5, 2**63 + 11], dtype=np.uint64)
    path = tmp_path / ("k.txt" if text else "k.keys")
    write_keys(path, keys, text=text)
    assert np.array_equal(read_keys(path), keys)
    if not text:
        assert path.stat().st_size == 24
        assert path.read_bytes()[:8] == (0).to_bytes(8, "little")


def test_load_dataset_rejects_unsorted(tmp_path):
    path = tmp_path / "bad.keys"
    write_keys(path, [5, 1])
    with pytest.raises(ValueError):
        load_dataset(path)


def test_read_keys_rejects_torn_file(tmp_path):
    path = tmp_path / "torn.keys"
    path.write_bytes(b"\x00" * 9)
    with pytest.raises(ValueError):
        read_keys(path)
