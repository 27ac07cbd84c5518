import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from conformal_kit.core import (
    ConfigError,
    Dataset,
    DataError,
    SeededRng,
    beta_quantile,
    empirical_quantile,
    lower_quantile,
    parallel_map,
    read_csv,
    reg_inc_beta,
    split,
    thread_count,
    write_dataset,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)
samples = st.lists(finite, min_size=1, max_size=40)
levels = st.floats(1e-6, 1.0)


# ---------------------------------------------------------------------------
# quantiles


@pytest.mark.parametrize("values, level, expected", [
    (range(1, 11), 0.3, 3),
    ([5], 0.9, 5),
    ([2, 4, 6, 8], 0.5, 4),
])
def test_empirical_quantile_examples(values, level, expected):
    assert empirical_quantile(list(values), level) == expected


def test_empirical_quantile_errors():
    with pytest.raises(ValueError, match="empty sample"):
        empirical_quantile([], 0.5)
    with pytest.raises(ValueError):
        empirical_quantile([1, 2], 0.0)
    with pytest.raises(ValueError):
        empirical_quantile([1, 2], -0.1)


def _brute_quantile(values, level):
    # smallest sample value v with #{x <= v} >= n * level
    s = sorted(values)
    n = len(s)
    for v in s:
        if sum(x <= v for x in s) >= n * level - 1e-9:
            return v
    return s[-1]


@given(samples, levels)
def test_empirical_quantile_matches_brute_force(values, level):
    assert empirical_quantile(values, level) == _brute_quantile(values, level)


@given(samples, levels, levels)
def test_empirical_quantile_monotone(values, a, b):
    lo, hi = sorted((a, b))
    assert empirical_quantile(values, lo) <= empirical_quantile(values, hi)


@given(samples)
def test_empirical_quantile_extremes(values):
    n = len(values)
    assert empirical_quantile(values, 1.0) == max(values)
    assert empirical_quantile(values, 1.0 / n) == min(values)
    assert empirical_quantile(values, 0.5 / n) == min(values)


@pytest.mark.parametrize("values, level, expected", [
    ([1, 2, 3], 1 / 3, 1),
    ([7], 0.5, 7),
    ([9, 9, 9], 1 / 3, 9),
])
def test_lower_quantile_examples(values, level, expected):
    assert lower_quantile(values, level) == expected


def test_lower_quantile_empty():
    with pytest.raises(ValueError):
        lower_quantile([], 0.5)


@given(samples, st.floats(0.0, 1.0))
def test_lower_quantile_below_upper(values, level):
    upper = empirical_quantile(values, max(level, 1e-12))
    assert lower_quantile(values, level) <= upper


def test_quantile_consistency_uniform():
    # sample 0.9-quantile of 10^4 uniforms is within 0.02 of 0.9 for nearly all seeds
    misses = 0
    for seed in range(200):
        u = SeededRng(seed).gen.random(10_000)
        misses += abs(empirical_quantile(u, 0.9) - 0.9) >= 0.02
    assert misses <= 2


# ---------------------------------------------------------------------------
# beta functions


@pytest.mark.parametrize("x, a, b, expected", [
    (0.3, 1, 1, 0.3),
    (0.5, 2, 2, 0.5),
    (0.5, 1, 2, 0.75),
])
def test_reg_inc_beta_examples(x, a, b, expected):
    assert reg_inc_beta(x, a, b) == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("a, b", [(0.5, 0.5), (1, 3), (2.5, 7), (90, 10), (500, 3), (0.1, 40)])
def test_reg_inc_beta_against_scipy(a, b):
    for x in np.linspace(0, 1, 41):
        assert reg_inc_beta(x, a, b) == pytest.approx(special.betainc(a, b, x), abs=1e-10)


@settings(max_examples=200)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(0.05, 200), st.floats(0.05, 200))
def test_reg_inc_beta_reflection(x, a, b):
    assert reg_inc_beta(x, a, b) + reg_inc_beta(1 - x, b, a) == pytest.approx(1.0, abs=1e-9)


def test_reg_inc_beta_range_errors():
    for args in [(-0.1, 1, 1), (1.1, 1, 1), (0.5, 0, 1), (0.5, 1, -2)]:
        with pytest.raises(ValueError):
            reg_inc_beta(*args)


def test_beta_quantile_examples():
    assert beta_quantile(0.5, 2, 2) == pytest.approx(0.5, abs=1e-10)
    assert beta_quantile(0.25, 1, 1) == pytest.approx(0.25, abs=1e-10)
    assert beta_quantile(0, 3, 4) == 0.0
    assert beta_quantile(1, 3, 4) == 1.0
    q = beta_quantile(0.05, 90, 10)
    assert q == pytest.approx(0.848, abs=2e-3)
    assert q == pytest.approx(stats.beta.ppf(0.05, 90, 10), abs=1e-9)


def test_beta_quantile_monte_carlo():
    draws = SeededRng(5).gen.beta(90, 10, 200_000)
    assert np.mean(draws <= beta_quantile(0.05, 90, 10)) == pytest.approx(0.05, abs=0.003)


def test_beta_quantile_range_error():
    with pytest.raises(ValueError):
        beta_quantile(1.5, 1, 1)


# ---------------------------------------------------------------------------
# datasets and splits


def _data(n, d=2):
    return Dataset(np.arange(n * d, dtype=float).reshape(n, d), np.arange(n, dtype=float))


@pytest.mark.parametrize("n, fractions, sizes", [
    (10, (0.5, 0.3, 0.2), (5, 3, 2)),
    (10, (1, 0, 0), (10, 0, 0)),
    (7, (0.5, 0.25, 0.25), (5, 1, 1)),
])
def test_split_sizes(n, fractions, sizes):
    s = split(_data(n), fractions, SeededRng(1))
    assert (len(s.train), len(s.calibration), len(s.test)) == sizes
    rows = np.concatenate([s.train_index, s.calibration_index, s.test_index])
    assert sorted(rows.tolist()) == list(range(n))


def test_split_deterministic():
    a = split(_data(50), (0.4, 0.4, 0.2), SeededRng(9).child("split"))
    b = split(_data(50), (0.4, 0.4, 0.2), SeededRng(9).child("split"))
    assert np.array_equal(a.calibration_index, b.calibration_index)
    c = split(_data(50), (0.4, 0.4, 0.2), SeededRng(10).child("split"))
    assert not np.array_equal(a.calibration_index, c.calibration_index)


def test_split_errors():
    with pytest.raises(DataError):
        split(_data(2), (0.4, 0.3, 0.3), SeededRng(0))
    with pytest.raises(ValueError):
        split(_data(5), (0.5, 0.6, -0.1), SeededRng(0))


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(DataError):
        Dataset(np.array([[np.nan]]), np.zeros(1))
    with pytest.raises(DataError):
        Dataset(np.zeros((1, 1)), np.array([np.inf]))
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), np.array([0, 1]), "classification")
    with pytest.raises(DataError):
        Dataset(np.zeros((1, 1)), np.array([1.5]), "classification")
    d = Dataset(np.zeros((3, 1)), np.array([1, 3, 2]), "classification")
    assert d.n_classes == 3


def test_csv_roundtrip(tmp_path):
    data = Dataset(np.array([[0.1, 2.0], [3.5, -1.0]]), np.array([1.25, -7.0]))
    path = tmp_path / "d.csv"
    write_dataset(path, data)
    back = read_csv(path)
    assert back.kind == "regression"
    assert np.array_equal(back.features, data.features)
    assert np.array_equal(back.responses, data.responses)


def test_csv_classification_and_errors(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x2,x1,label\n1,2,1\n3,4,2\n")
    d = read_csv(p)
    assert d.kind == "classification"
    assert d.features.tolist() == [[2, 1], [4, 3]]
    with pytest.raises(DataError):
        read_csv(p, kind="regression")
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,y\n1,2\n3,\n")
    with pytest.raises(DataError, match="line 3"):
        read_csv(bad)
    nan = tmp_path / "nan.csv"
    nan.write_text("x1,y\n1,nan\n")
    with pytest.raises(DataError):
        read_csv(nan)


# ---------------------------------------------------------------------------
# randomness and parallelism


def test_seeded_rng_substreams():
    a = SeededRng(7).child("smoothing").child(3).gen.random(5)
    root = SeededRng(7)
    root.gen.random(1000)
    root.child("other").gen.random(10)
    b = root.child("smoothing").child(3).gen.random(5)
    assert np.array_equal(a, b)
    c = SeededRng(7).child("smoothing").child(4).gen.random(5)
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        SeededRng(-1)


def test_parallel_map_order_and_threads(monkeypatch):
    def work(i):
        return SeededRng(1).child(f"mc:{i}").gen.random()

    serial = parallel_map(work, range(20), 1)
    threaded = parallel_map(work, range(20), 4)
    assert serial == threaded
    monkeypatch.setenv("CONFORMAL_KIT_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("CONFORMAL_KIT_THREADS", "x")
    with pytest.raises(ConfigError):
        thread_count()
    monkeypatch.delenv("CONFORMAL_KIT_THREADS")
    assert math.isclose(sum(serial), sum(parallel_map(work, range(20))))
