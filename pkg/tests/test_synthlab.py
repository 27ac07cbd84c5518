import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from conformal_kit.conditional import equal_frequency_bins
from conformal_kit.core import SeededRng, reg_inc_beta
from conformal_kit.scores import RegressionOutputs, standardized_score
from conformal_kit.synthlab import (
    FAMILIES,
    NOISES,
    GeneratorSpec,
    MisspecSpec,
    beta_coverage_band,
    bootstrap_quantile_test,
    cdf_curves,
    generate,
    hd_quantile,
    misspecify,
    pivotality_check,
    standard_noise,
)


def test_type2_moments():
    n = 40_000
    s = generate(GeneratorSpec("type2", d=3, params={"low": 1.0, "high": 5.0}), n, SeededRng(0))
    ratio = s.data.responses / s.mu
    assert abs(ratio.mean() - 1) <= 3 / math.sqrt(n)
    assert ratio.std() == pytest.approx(0.1, abs=4 * 0.1 / math.sqrt(2 * n))


def test_type1_mean():
    n = 20_000
    y = generate(GeneratorSpec("type1", d=2), n, SeededRng(1)).data.responses
    assert abs(y.mean()) <= 3 / math.sqrt(n)
    assert y.std() == pytest.approx(1.0, abs=4 / math.sqrt(n))


def test_triangular_moments():
    n = 40_000
    y = generate(GeneratorSpec("triangular", params={"lam0": 5.0, "lam1": 0.0}), n, SeededRng(2)).data.responses
    sd = 5 / (3 * math.sqrt(2))
    assert abs(y.mean() - 10 / 3) <= 4 * sd / math.sqrt(n)
    assert y.std() == pytest.approx(sd, abs=4 * sd / math.sqrt(n))
    assert y.min() >= 0 and y.max() <= 5


def test_exp_mean_features():
    n = 40_000
    s = generate(GeneratorSpec("exp-mean", d=5), n, SeededRng(3))
    X = s.data.features
    assert X.mean(axis=0) == pytest.approx([0, 2, 4, 6, 8], abs=4 * math.sqrt(6 / n))
    assert X.var(axis=0) == pytest.approx([2, 3, 4, 5, 6], rel=0.05)
    assert np.all(s.data.responses >= 0)


@pytest.mark.parametrize("family", FAMILIES)
def test_generate_deterministic_and_moments(family):
    d = 2 if family == "sum-normal" else 3
    spec = GeneratorSpec(family, d=d)
    a = generate(spec, 500, SeededRng(5))
    b = generate(spec, 500, SeededRng(5))
    assert np.array_equal(a.data.responses, b.data.responses)
    assert np.all(a.sigma > 0)
    if family not in ("type4", "exp-mean", "triangular"):
        z = (a.data.responses - a.mu) / a.sigma
        assert abs(z.mean()) <= 4 / math.sqrt(500)


@pytest.mark.parametrize("noise", NOISES)
def test_standard_noise_standardized(noise):
    z = standard_noise(noise, 200_000, SeededRng(6).gen)
    assert abs(z.mean()) <= 4 / math.sqrt(z.size)
    assert z.std() == pytest.approx(1.0, abs=0.01)


def test_generator_errors():
    with pytest.raises(ValueError):
        GeneratorSpec("type9")
    with pytest.raises(ValueError):
        GeneratorSpec("type1", noise="cauchy")
    with pytest.raises(ValueError):
        GeneratorSpec("type2", params={"cv": -1})
    with pytest.raises(ValueError):
        GeneratorSpec("type1", params={"bogus": 1})
    with pytest.raises(ValueError):
        generate(GeneratorSpec("type1"), 0)


def test_misspecify():
    out = RegressionOutputs(point=np.array([1.0, 2.0]), spread=np.array([0.5, 2.0]))
    scaled = misspecify(out, MisspecSpec("sigma-scale", 5.0))
    assert scaled.spread.tolist() == [2.5, 10.0]
    same = misspecify(out, MisspecSpec("sigma-shift", 0.0), SeededRng(0))
    assert np.array_equal(same.spread, out.spread) and np.array_equal(same.point, out.point)
    fixed = misspecify(RegressionOutputs(point=0.0, spread=math.sqrt(0.5)), MisspecSpec("explicit-quadratic"))
    assert fixed.spread ** 2 == pytest.approx(0.5)
    clipped = misspecify(out, MisspecSpec("sigma-shift", 100.0), SeededRng(1))
    assert np.all(clipped.spread >= 1e-6)
    shifted = misspecify(out, MisspecSpec("mu-shift-prop", 0.0), SeededRng(0))
    assert np.array_equal(shifted.point, out.point)
    with pytest.raises(ValueError):
        MisspecSpec("rotate")


def test_cdf_curves():
    same = cdf_curves({1: [1, 2, 3], 2: [1, 2, 3]}, None)
    assert [r[1:] for r in same if r[0] == 1] == [r[1:] for r in same if r[0] == 2]
    rows = cdf_curves({1: [1.0, 2.0], 2: [101.0, 102.0]})
    for x in (2, 50, 100):
        assert _ecdf_after(rows, 1, x) - _ecdf_after(rows, 2, x) == 1.0
    assert [r[1:] for r in rows if r[0] == 1] == [(1.0, 0.0), (1.0, 0.5), (2.0, 0.5), (2.0, 1.0)]
    with pytest.warns(UserWarning, match="no scores"):
        cdf_curves({1: [], 2: [1.0]})


def _ecdf_after(rows, group, x):
    pts = [(s, c) for g, s, c in rows if g == group and s <= x]
    return max(pts)[1] if pts else 0.0


@given(st.lists(st.integers(0, 6), min_size=1, max_size=10), st.lists(st.integers(0, 6), min_size=1, max_size=10))
def test_cdf_marginal_is_mixture(a, b):
    rows = cdf_curves({1: a, 2: b})
    n = len(a) + len(b)
    for x in range(-1, 8):
        mix = (len(a) * _ecdf_after(rows, 1, x) + len(b) * _ecdf_after(rows, 2, x)) / n
        assert _ecdf_after(rows, "all", x) == pytest.approx(mix)


def hd_oracle(values, q):
    s = np.sort(values)
    n = s.size
    a, b = (n + 1) * q, (n + 1) * (1 - q)
    pdf = lambda t: stats.beta.pdf(t, a, b)  # noqa: E731
    w = [integrate.quad(pdf, (i - 1) / n, i / n, epsabs=1e-13)[0] for i in range(1, n + 1)]
    return float(np.dot(w, s))


def test_hd_quantile_examples():
    assert hd_quantile([4.2], 0.3) == pytest.approx(4.2)
    assert hd_quantile([1, 2, 3, 4, 5], 0.5) == pytest.approx(3.0)
    v = hd_quantile(range(1, 11), 0.9)
    assert 8 < v < 10
    assert v == pytest.approx(hd_oracle(np.arange(1.0, 11.0), 0.9), abs=1e-8)
    for q in (0.0, 1.0):
        with pytest.raises(ValueError):
            hd_quantile([1, 2], q)
    with pytest.raises(ValueError):
        hd_quantile([], 0.5)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=25), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_hd_quantile_bounds_and_monotone(values, q1, q2):
    lo, hi = sorted((q1, q2))
    a, b = hd_quantile(values, lo), hd_quantile(values, hi)
    assert min(values) - 1e-9 <= a <= b + 1e-9 <= max(values) + 2e-9


def test_bootstrap_quantile_test():
    gen = SeededRng(7).gen
    far = bootstrap_quantile_test(gen.normal(size=200), gen.normal(size=200) + 100, 0.1, 200, rng=SeededRng(8))
    assert far[2] and far[1] < 0
    straddles = 0
    for seed in range(40):
        g = SeededRng(1000 + seed).gen
        lo, hi, excl = bootstrap_quantile_test(g.normal(size=100), g.normal(size=100), 0.1, 1000,
                                               rng=SeededRng(seed))
        straddles += lo <= 0 <= hi and not excl
    assert straddles >= 36
    with pytest.raises(ValueError):
        bootstrap_quantile_test([1.0], [2.0], 0.1, 1)
    with pytest.raises(ValueError):
        bootstrap_quantile_test([], [2.0], 0.1, 200)


def test_beta_coverage_band():
    lo, hi = beta_coverage_band(99, 0.1, 0.1)
    assert reg_inc_beta(lo, 90, 10) == pytest.approx(0.05, abs=1e-9)
    assert (lo, hi) == pytest.approx((0.848, 0.945), abs=2e-3)
    draws = SeededRng(9).gen.beta(90, 10, 200_000)
    assert np.mean((draws >= lo) & (draws <= hi)) == pytest.approx(0.9, abs=0.003)
    assert beta_coverage_band(50, 0.0) == (1.0, 1.0)


@pytest.mark.parametrize("noise", NOISES)
def test_pivotality(noise):
    n = 10_000
    spec = GeneratorSpec("type3", d=2, noise=noise)
    s = generate(spec, n, SeededRng(10))
    z = standardized_score(RegressionOutputs(point=s.mu, spread=s.sigma), s.data.responses)
    bins = equal_frequency_bins(s.sigma, 4).assign(s.sigma)
    assert all(ok for _, _, ok in pivotality_check(z, bins).values())
