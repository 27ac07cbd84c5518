"""Baseline predictors feeding the nonconformity scores.

k-nearest-neighbour models (point, quantile, mean/spread and class
probabilities), ridge regression, bagged k-NN with out-of-bag tracking, and
oracle models that report a generator's true mean and spread.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from .core import DataError, NumericError, as_generator, check_alpha, order_rank
from .scores import RegressionOutputs

__all__ = [
    "KnnModel",
    "knn_fit",
    "knn_neighbors",
    "knn_point",
    "knn_quantile",
    "knn_meanvar",
    "knn_class_probs",
    "knn_interval_outputs",
    "knn_refitter",
    "RidgeModel",
    "ridge_fit",
    "ridge_predict",
    "ridge_refitter",
    "OracleModel",
    "oracle_outputs",
    "BaggedKnn",
    "bagged_knn_fit",
    "normal_interval",
]


def _matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X[:, None]
    return X


def _queries(x, d: int) -> tuple[np.ndarray, bool]:
    """Query matrix plus a flag telling whether a single point was given."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1), True
    if x.ndim == 1:
        if d == 1:
            return x.reshape(-1, 1), False
        if x.size == d:
            return x.reshape(1, d), True
        raise DataError(f"query has {x.size} features, model expects {d}")
    return x, False


def _out(v, single: bool):
    v = np.asarray(v, dtype=float)
    return float(v.ravel()[0]) if single else v


# ---------------------------------------------------------------------------
# k-NN


@dataclass(frozen=True)
class KnnModel:
    """Stored training rows; Euclidean distance, ties by ascending row index."""

    X: np.ndarray
    y: np.ndarray
    k: int

    def __post_init__(self):
        X = _matrix(self.X)
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.size:
            raise DataError(f"{X.shape[0]} feature rows but {y.size} responses")
        if not 1 <= self.k <= y.size:
            raise ValueError(f"k must lie in 1..{y.size}, got {self.k}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def knn_fit(X, y, k: int) -> KnnModel:
    return KnnModel(X, y, int(k))


def knn_neighbors(model: KnnModel, x) -> tuple[np.ndarray, bool]:
    """Indices (m, k) of the nearest training rows for each query."""
    if not isinstance(model, KnnModel):
        raise DataError("model is not a fitted k-NN model")
    Q, single = _queries(x, model.dim)
    if Q.shape[1] != model.dim:
        raise DataError(f"query has {Q.shape[1]} features, model expects {model.dim}")
    out = np.empty((Q.shape[0], model.k), dtype=int)
    n, d = model.X.shape
    chunk = max(1, 4_000_000 // (n * d))
    for start in range(0, Q.shape[0], chunk):
        q = Q[start:start + chunk]
        # explicit differences keep equal distances exactly equal
        d2 = np.sum((q[:, None, :] - model.X[None, :, :]) ** 2, axis=2)
        out[start:start + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :model.k]
    return out, single


def knn_point(model: KnnModel, x):
    idx, single = knn_neighbors(model, x)
    return _out(model.y[idx].mean(axis=1), single)


def knn_quantile(model: KnnModel, x, level: float):
    if not 0 < level <= 1:
        raise ValueError("quantile level must lie in (0, 1]")
    idx, single = knn_neighbors(model, x)
    vals = np.sort(model.y[idx], axis=1)
    return _out(vals[:, order_rank(model.k, level) - 1], single)


def knn_meanvar(model: KnnModel, x, eps: float = 1e-6):
    """Neighbour mean and population standard deviation floored at ``eps``."""
    if model.k < 2:
        raise ValueError("a spread estimate needs k >= 2")
    idx, single = knn_neighbors(model, x)
    vals = model.y[idx]
    return _out(vals.mean(axis=1), single), _out(np.maximum(vals.std(axis=1), eps), single)


def knn_class_probs(model: KnnModel, x, k_classes: int, laplace: float = 0.0):
    """``(count_c + laplace) / (k + laplace * k_classes)`` over classes ``1..k_classes``."""
    if laplace < 0:
        raise ValueError("laplace smoothing must be nonnegative")
    labels = model.y.astype(int)
    if np.any(labels != model.y) or np.any(labels < 1) or np.any(labels > k_classes):
        raise DataError(f"training labels must lie in 1..{k_classes}")
    idx, single = knn_neighbors(model, x)
    counts = np.zeros((idx.shape[0], k_classes))
    np.add.at(counts, (np.repeat(np.arange(idx.shape[0]), model.k), labels[idx].ravel() - 1), 1.0)
    probs = (counts + laplace) / (model.k + laplace * k_classes)
    return probs[0] if single else probs


def knn_interval_outputs(model: KnnModel, x, alpha: float) -> RegressionOutputs:
    """Point, neighbour spread and neighbour-quantile bounds at ``alpha/2``
    and ``1 - alpha/2``."""
    alpha = check_alpha(alpha)
    lo = knn_quantile(model, x, max(alpha / 2, 1e-12))
    hi = knn_quantile(model, x, 1 - alpha / 2)
    return RegressionOutputs(point=knn_point(model, x), lower=lo, upper=hi)


def knn_refitter(k: int) -> Callable:
    """Point refitter (see :mod:`conformal_kit.resample`); ``k`` is capped at
    the training size."""
    def refit(X, y):
        model = knn_fit(X, y, min(k, np.asarray(y).size))
        return lambda Q: np.atleast_1d(knn_point(model, _matrix(Q)))
    return refit


# ---------------------------------------------------------------------------
# ridge


@dataclass(frozen=True)
class RidgeModel:
    intercept: float
    weights: np.ndarray
    penalty: float


def ridge_fit(X, y, penalty: float = 0.0) -> RidgeModel:
    """Ridge regression on centred data; the intercept is not penalized."""
    X = _matrix(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise DataError(f"{X.shape[0]} feature rows but {y.size} responses")
    if penalty < 0:
        raise ValueError("penalty must be nonnegative")
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    gram = Xc.T @ Xc + penalty * np.eye(X.shape[1])
    if np.linalg.cond(gram) > 1e12:
        raise NumericError("singular normal equations; use a positive ridge penalty")
    w = np.linalg.solve(gram, Xc.T @ yc)
    if not np.all(np.isfinite(w)):
        raise NumericError("non-finite ridge coefficients")
    return RidgeModel(float(ym - xm @ w), w, float(penalty))


def ridge_predict(model: RidgeModel, x):
    Q, single = _queries(x, model.weights.size)
    return _out(model.intercept + Q @ model.weights, single)


def ridge_refitter(penalty: float = 0.0) -> Callable:
    def refit(X, y):
        model = ridge_fit(X, y, penalty)
        return lambda Q: np.atleast_1d(ridge_predict(model, _matrix(Q) if model.weights.size == 1 else Q))
    return refit


# ---------------------------------------------------------------------------
# oracle


@dataclass(frozen=True)
class OracleModel:
    """True conditional mean ``mu(X)`` and spread ``sigma(X)`` (row-wise)."""

    mu: Callable
    sigma: Callable


def oracle_outputs(model: OracleModel, x) -> RegressionOutputs:
    X = np.asarray(x, dtype=float)
    single = X.ndim <= 1
    Q = np.atleast_2d(X)
    mu, sigma = np.asarray(model.mu(Q), dtype=float), np.asarray(model.sigma(Q), dtype=float)
    if single:
        return RegressionOutputs(point=float(mu.ravel()[0]), spread=float(sigma.ravel()[0]))
    return RegressionOutputs(point=mu, spread=sigma)


def normal_interval(mu, sigma, alpha: float) -> RegressionOutputs:
    """Central Gaussian interval from a mean and standard deviation."""
    alpha = check_alpha(alpha)
    z = norm.ppf(1 - alpha / 2) if alpha > 0 else np.inf
    mu, sigma = np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
    return RegressionOutputs(point=mu, spread=sigma, lower=mu - z * sigma, upper=mu + z * sigma)


# ---------------------------------------------------------------------------
# bagged k-NN


@dataclass(frozen=True)
class BaggedKnn:
    """Bootstrap ensemble of k-NN regressors with out-of-bag bookkeeping."""

    X: np.ndarray
    y: np.ndarray
    k: int
    bags: tuple
    _oob: list = field(default_factory=list, repr=False, compare=False)

    def _models(self):
        return [knn_fit(self.X[b], self.y[b], min(self.k, b.size)) for b in self.bags]

    def predict(self, x):
        Q, single = _queries(x, self.X.shape[1])
        mean = np.mean([knn_point(m, Q) for m in self._models()], axis=0)
        return float(mean[0]) if single else mean

    def oob_predictions(self) -> np.ndarray:
        """Mean prediction over bags that left each row out (NaN if none)."""
        if not self._oob:
            n = self.y.size
            total, count = np.zeros(n), np.zeros(n)
            for b, m in zip(self.bags, self._models()):
                out = np.setdiff1d(np.arange(n), b)
                if out.size:
                    total[out] += np.atleast_1d(knn_point(m, self.X[out]))
                    count[out] += 1
            with np.errstate(invalid="ignore", divide="ignore"):
                self._oob.append(np.where(count > 0, total / np.maximum(count, 1), np.nan))
        return self._oob[0]


def bagged_knn_fit(X, y, k: int, n_bags: int = 50, rng=None) -> BaggedKnn:
    X = _matrix(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise DataError(f"{X.shape[0]} feature rows but {y.size} responses")
    if n_bags < 1:
        raise ValueError("need at least one bag")
    gen = as_generator(rng)
    bags = tuple(np.sort(gen.integers(0, y.size, y.size)) for _ in range(n_bags))
    return BaggedKnn(X, y, int(k), bags)
