import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conformal_kit.core import DataError, SeededRng
from conformal_kit.scores import (
    RapsConfig,
    RegressionOutputs,
    aps_score,
    binary_softmax_score,
    descending_rank,
    interval_score,
    normalized_score,
    raps_score,
    residual_score,
    signed_residual_score,
    softmax_score,
    standardized_score,
    zero_one_score,
)

reals = st.floats(-1e3, 1e3, allow_nan=False)
spreads = st.floats(1e-3, 1e3)


@pytest.mark.parametrize("point, y, expected", [(3, 7, 4), (5, 5, 0), (-1, 2, 3)])
def test_residual_score(point, y, expected):
    assert residual_score(RegressionOutputs(point=point), y) == expected


@pytest.mark.parametrize("point, y, expected", [(3, 7, 4), (7, 3, -4), (0, 0, 0)])
def test_signed_residual_score(point, y, expected):
    assert signed_residual_score(RegressionOutputs(point=point), y) == expected


@pytest.mark.parametrize("point, spread, y, expected", [(0, 2, 3, 1.5), (1, 1, 1, 0), (10, 0.5, 9, 2)])
def test_normalized_score(point, spread, y, expected):
    assert normalized_score(RegressionOutputs(point=point, spread=spread), y) == expected


@pytest.mark.parametrize("point, spread, y, expected", [(0, 1, 1.5, 1.5), (2, 2, 0, -1), (5, 10, 5, 0)])
def test_standardized_score(point, spread, y, expected):
    assert standardized_score(RegressionOutputs(point=point, spread=spread), y) == expected


def test_nonpositive_difficulty():
    with pytest.raises(DataError, match="nonpositive difficulty"):
        RegressionOutputs(point=0, spread=0)
    with pytest.raises(DataError):
        RegressionOutputs(point=0, spread=-1)


@pytest.mark.parametrize("y, expected", [(2, 1), (0.5, -0.5), (-1, 1)])
def test_interval_score(y, expected):
    assert interval_score(RegressionOutputs(lower=0, upper=1), y) == expected


def test_interval_score_bad_bounds():
    with pytest.raises(DataError):
        RegressionOutputs(lower=2, upper=1)


def test_missing_outputs():
    with pytest.raises(DataError):
        normalized_score(RegressionOutputs(point=1), 2)
    with pytest.raises(DataError):
        interval_score(RegressionOutputs(point=1), 2)


@pytest.mark.parametrize("pred, y, expected", [(2, 2, 0), (2, 3, 1), (1, 1, 0)])
def test_zero_one_score(pred, y, expected):
    assert zero_one_score(pred, y) == expected


def test_softmax_score():
    assert softmax_score([0.3, 0.7], 1) == pytest.approx(0.7)
    assert softmax_score([1.0, 0.0], 1) == 0
    assert binary_softmax_score(0.8, 0) == pytest.approx(0.8)
    assert binary_softmax_score(0.8, 1) == pytest.approx(0.2)
    with pytest.raises(DataError):
        softmax_score([0.3, 0.7], 3)
    with pytest.raises(DataError):
        softmax_score([0.3, 0.6], 1)


PI = [0.5, 0.3, 0.2]


def _aps_oracle(p, y):
    # sum of the ascending-sorted probabilities from y's position to the end
    asc = sorted(range(len(p)), key=lambda i: (p[i], -i))
    r = asc.index(y - 1)
    return sum(p[i] for i in asc[r:])


@pytest.mark.parametrize("y, expected", [(1, 0.5), (2, 0.8), (3, 1.0)])
def test_aps_deterministic(y, expected):
    assert aps_score(PI, y) == pytest.approx(expected)
    assert aps_score(PI, y) == pytest.approx(_aps_oracle(PI, y))


def test_aps_randomized_range():
    gen = SeededRng(1).gen
    for y, m in [(1, 0.0), (2, 0.5), (3, 0.8)]:
        for _ in range(20):
            s = aps_score(PI, y, rng=gen, randomized=True)
            assert m <= s <= m + PI[y - 1]


def test_aps_ties_by_index():
    p = [0.25, 0.25, 0.5]
    # among the tied labels, class 1 precedes class 2
    assert aps_score(p, 1) == pytest.approx(0.75)
    assert aps_score(p, 2) == pytest.approx(1.0)
    assert descending_rank(p).tolist() == [2, 3, 1]


@pytest.mark.parametrize("y, expected", [(1, 0.5), (2, 0.9)])
def test_raps(y, expected):
    assert raps_score(PI, y, RapsConfig(lam=0.1, k_reg=1)) == pytest.approx(expected)


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.data())
def test_raps_lambda_zero_is_aps(raw, data):
    p = np.array(raw) / np.sum(raw)
    y = data.draw(st.integers(1, p.size))
    assert raps_score(p, y, RapsConfig(lam=0.0, k_reg=2)) == pytest.approx(aps_score(p, y))


def test_raps_ascending_alternative():
    cfg = RapsConfig(lam=0.1, k_reg=1, rank="ascending")
    # the most probable class has ascending rank 3
    assert raps_score(PI, 1, cfg) == pytest.approx(0.5 + 0.2)
    with pytest.raises(ValueError):
        RapsConfig(rank="sideways")


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=7))
def test_aps_matrix_matches_oracle(raw):
    p = list(np.array(raw) / np.sum(raw))
    all_scores = aps_score(p)
    for y in range(1, len(p) + 1):
        assert all_scores[y - 1] == pytest.approx(_aps_oracle(p, y))
        assert 0 < all_scores[y - 1] <= 1 + 1e-12


@given(reals, spreads, reals)
def test_absolute_versions(point, spread, y):
    out = RegressionOutputs(point=point, spread=spread)
    assert residual_score(out, y) == abs(signed_residual_score(out, y))
    assert normalized_score(out, y) == pytest.approx(abs(standardized_score(out, y)))


@given(reals, st.floats(0, 100), reals)
def test_interval_score_sign(lower, width, y):
    out = RegressionOutputs(lower=lower, upper=lower + width)
    assert (interval_score(out, y) <= 0) == (lower <= y <= lower + width)


@given(reals, spreads, reals, st.floats(-10, 10))
def test_normalized_location_invariance(point, spread, y, c):
    a = normalized_score(RegressionOutputs(point=point, spread=spread), y)
    b = normalized_score(RegressionOutputs(point=point + c * spread, spread=spread), y + c * spread)
    assert a == pytest.approx(b, rel=1e-6, abs=1e-6)


def test_normalized_argsort_invariant_under_common_rescaling():
    gen = SeededRng(3).gen
    mu, sigma, y = gen.normal(size=50), gen.uniform(0.5, 2, 50), gen.normal(size=50)
    base = normalized_score(RegressionOutputs(point=mu, spread=sigma), y)
    for lam in (0.1, 3.0, 17.0):
        scaled = normalized_score(RegressionOutputs(point=mu, spread=lam * sigma), y)
        assert np.array_equal(np.argsort(base, kind="stable"), np.argsort(scaled, kind="stable"))


def test_vectorized_scores():
    probs = np.array([PI, [0.1, 0.1, 0.8]])
    assert softmax_score(probs, [1, 3]) == pytest.approx([0.5, 0.2])
    assert aps_score(probs).shape == (2, 3)
    assert list(itertools.chain(aps_score(probs, [2, 3]))) == pytest.approx([0.8, 0.8])
