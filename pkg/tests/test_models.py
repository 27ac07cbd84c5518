import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conformal_kit.core import DataError, NumericError, SeededRng
from conformal_kit.models import (
    OracleModel,
    bagged_knn_fit,
    knn_class_probs,
    knn_fit,
    knn_meanvar,
    knn_point,
    knn_quantile,
    knn_refitter,
    normal_interval,
    oracle_outputs,
    ridge_fit,
    ridge_predict,
)
from conformal_kit.synthlab import GeneratorSpec


def test_knn_point_examples():
    X, y = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]), np.array([0.0, 1.0, 2.0])
    assert knn_point(knn_fit(X, y, 1), [1.0, 1.0]) == 1.0
    assert knn_point(knn_fit(X, y, 3), [5.0, -3.0]) == pytest.approx(1.0)
    # (0,0) and (2,2) are equidistant from (1,1) once the middle row is dropped
    tie = knn_fit(X[[0, 2]], y[[0, 2]], 1)
    assert knn_point(tie, [1.0, 1.0]) == 0.0
    flipped = knn_fit(X[[2, 0]], y[[2, 0]], 1)
    assert knn_point(flipped, [1.0, 1.0]) == 2.0


def test_knn_errors():
    with pytest.raises(ValueError):
        knn_fit(np.zeros((2, 1)), np.zeros(2), 3)
    with pytest.raises(DataError):
        knn_point("not a model", 0.0)
    with pytest.raises(DataError):
        knn_point(knn_fit(np.zeros((2, 2)), np.zeros(2), 1), [1.0, 2.0, 3.0])


def test_knn_quantile_examples():
    X, y = np.arange(10.0)[:, None], np.arange(1.0, 11.0)
    m = knn_fit(X, y, 10)
    assert knn_quantile(m, 4.0, 0.3) == 3
    assert knn_quantile(m, 4.0, 1.0) == 10
    one = knn_fit(X, y, 1)
    assert all(knn_quantile(one, 6.0, q) == 7 for q in (0.01, 0.5, 1.0))


def test_knn_meanvar_examples():
    X = np.arange(3.0)[:, None]
    mu, sd = knn_meanvar(knn_fit(X, np.array([4.0, 4.0, 4.0]), 3), 1.0)
    assert (mu, sd) == (4.0, 1e-6)
    mu, sd = knn_meanvar(knn_fit(X[:2], np.array([0.0, 2.0]), 2), 0.5)
    assert (mu, sd) == (1.0, 1.0)
    mu, sd = knn_meanvar(knn_fit(X, np.array([1.0, 2.0, 3.0]), 3), 1.0)
    assert mu == 2.0 and sd == pytest.approx(math.sqrt(2 / 3))
    with pytest.raises(ValueError):
        knn_meanvar(knn_fit(X, np.zeros(3), 1), 0.0)


def test_knn_class_probs_examples():
    X = np.arange(3.0)[:, None]
    m = knn_fit(X, np.array([1.0, 1.0, 2.0]), 3)
    assert knn_class_probs(m, 1.0, 3, 1.0) == pytest.approx([3 / 6, 2 / 6, 1 / 6])
    one_hot = knn_class_probs(knn_fit(X, np.ones(3), 3), 1.0, 3, 0.0)
    assert one_hot.tolist() == [1.0, 0.0, 0.0]
    assert knn_class_probs(m, 1.0, 3, 1e9) == pytest.approx([1 / 3] * 3, abs=1e-8)
    with pytest.raises(DataError):
        knn_class_probs(m, 1.0, 1)


@given(st.integers(0, 10_000), st.integers(1, 8), st.floats(0, 5))
def test_knn_invariants(seed, k, laplace):
    gen = SeededRng(seed).gen
    X = gen.normal(size=(12, 2))
    y = gen.normal(size=12)
    m = knn_fit(X, y, k)
    x = gen.normal(size=2)
    qs = [knn_quantile(m, x, lv) for lv in np.linspace(0.05, 1, 12)]
    assert all(b >= a for a, b in zip(qs, qs[1:]))
    assert knn_quantile(m, x, 1 / k) <= knn_point(m, x) + 1e-12 <= knn_quantile(m, x, 1.0) + 2e-12
    labels = gen.integers(1, 4, 12).astype(float)
    p = knn_class_probs(knn_fit(X, labels, k), x, 3, laplace)
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0)


def test_ridge_examples():
    X = np.array([[0.0], [1.0], [2.0]])
    exact = ridge_fit(X, 3 * X[:, 0] - 1, 0.0)
    assert ridge_predict(exact, X) == pytest.approx([-1, 2, 5])
    toy = ridge_fit(np.array([[0.0], [2.0]]), np.array([0.0, 2.0]), 2.0)
    assert toy.weights[0] == pytest.approx(0.5) and toy.intercept == pytest.approx(0.5)
    assert ridge_predict(toy, 0.0) == pytest.approx(0.5)
    big = ridge_fit(X, np.array([1.0, 5.0, 3.0]), 1e12)
    assert ridge_predict(big, 10.0) == pytest.approx(3.0, abs=1e-6)
    with pytest.raises(NumericError, match="penalty"):
        ridge_fit(np.ones((3, 1)), np.arange(3.0), 0.0)


@given(st.integers(0, 10_000), st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3), st.floats(-5, 5))
def test_ridge_affine_equivariance(seed, a, b):
    gen = SeededRng(seed).gen
    X, y = gen.normal(size=(20, 3)), gen.normal(size=20)
    Q = gen.normal(size=(4, 3))
    base = ridge_predict(ridge_fit(X, y, 0.7), Q)
    moved = ridge_predict(ridge_fit(X, a * y + b, 0.7), Q)
    assert moved == pytest.approx(a * base + b, abs=1e-9)


def test_oracle_outputs():
    type2 = GeneratorSpec("type2", params={"high": 20.0}).oracle()
    out = oracle_outputs(type2, [10.0])
    assert (out.point, out.spread) == pytest.approx((10.0, 1.0))
    out = oracle_outputs(GeneratorSpec("sum-normal", d=2).oracle(), [0.5, 0.5])
    assert (out.point, out.spread) == pytest.approx((1.0, 1.0))
    flat = OracleModel(lambda X: np.zeros(len(X)), lambda X: np.ones(len(X)))
    out = oracle_outputs(flat, [3.0, 4.0])
    assert (out.point, out.spread) == (0.0, 1.0)


def test_normal_interval():
    out = normal_interval(1.0, 2.0, 0.05)
    assert out.upper - out.point == pytest.approx(2.0 * 1.959964, abs=1e-5)
    assert out.point - out.lower == pytest.approx(out.upper - out.point)


def test_refitter_and_bagging():
    gen = SeededRng(2).gen
    X, y = gen.uniform(size=(30, 1)), gen.normal(size=30)
    pred = knn_refitter(50)(X[:3], y[:3])(np.array([[0.5]]))
    assert pred[0] == pytest.approx(y[:3].mean())
    bag = bagged_knn_fit(X, y, 3, 40, SeededRng(4))
    again = bagged_knn_fit(X, y, 3, 40, SeededRng(4))
    oob = bag.oob_predictions()
    assert np.array_equal(oob, again.oob_predictions(), equal_nan=True)
    for i in (0, 5, 17):
        models = [knn_fit(X[b], y[b], 3) for b in bag.bags if i not in b]
        if models:
            assert oob[i] == pytest.approx(np.mean([knn_point(m, X[i]) for m in models]))
    single = bagged_knn_fit(X, y, 3, 1, SeededRng(4))
    assert np.isnan(single.oob_predictions()).any()
    assert bag.predict(X[0]) == pytest.approx(np.mean([knn_point(knn_fit(X[b], y[b], 3), X[0]) for b in bag.bags]))
