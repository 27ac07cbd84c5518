"""Transductive, cross-conformal, jackknife-family and out-of-bag predictors.

Two refitting conventions are used:

* a *scorer refitter* ``refit(X, y) -> scorer`` where ``scorer(X, y)``
  returns nonconformity scores (used by TCP and CCP);
* a *point refitter* ``refit(X, y) -> predict`` where ``predict(X)`` returns
  point predictions (used by the jackknife family).

:func:`residual_refitter` turns the second kind into the first. Refitters
must not depend on the order of their training rows.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .calibrate import ConformalBand, PredictionSet
from .core import ConfigError, DataError, as_generator, check_alpha, empirical_quantile, order_rank

__all__ = [
    "FoldPlan",
    "make_folds",
    "leave_one_out_folds",
    "residual_refitter",
    "tcp_predict_set",
    "ccp_p_value",
    "ccp_avg_p_value",
    "CcpFit",
    "ccp_fit",
    "ccp_grid_p_values",
    "ccp_grid_set",
    "jackknife_band",
    "jackknife_plus_band",
    "cv_plus_band",
    "oob_conformal_band",
]


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of rows to folds ``1..f``."""

    fold_of: np.ndarray
    f: int

    def __post_init__(self):
        fold_of = np.asarray(self.fold_of, dtype=int).ravel()
        if self.f < 1:
            raise ValueError("need at least one fold")
        if np.any(fold_of < 1) or np.any(fold_of > self.f):
            raise ValueError(f"fold ids must lie in 1..{self.f}")
        if np.unique(fold_of).size != self.f:
            raise ValueError("every fold must be nonempty")
        object.__setattr__(self, "fold_of", fold_of)

    def __len__(self) -> int:
        return self.fold_of.size

    def rows(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == s)


def make_folds(n: int, f: int, rng=None) -> FoldPlan:
    """Seeded uniform fold assignment with sizes differing by at most one."""
    if not 1 <= f <= n:
        raise ValueError(f"cannot split {n} rows into {f} folds")
    perm = as_generator(rng).permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[perm] = np.arange(n) % f + 1
    return FoldPlan(fold_of, f)


def leave_one_out_folds(n: int) -> FoldPlan:
    return FoldPlan(np.arange(1, n + 1), n)


def residual_refitter(point_refit: Callable) -> Callable:
    """Scorer refitter with absolute-residual scores around ``point_refit``."""
    def refit(X, y):
        predict = point_refit(X, y)
        return lambda Xq, yq: np.abs(np.asarray(yq, dtype=float) - np.asarray(predict(Xq), dtype=float))
    return refit


def _xy(X, y):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y).ravel()
    if X.shape[0] != y.size:
        raise DataError(f"{X.shape[0]} feature rows but {y.size} responses")
    return X, y


def _query(x, d):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x.reshape(-1, 1) if d == 1 else x.reshape(1, d)
    return x


# ---------------------------------------------------------------------------
# transductive


def tcp_predict_set(X, y, x, label_space, refit: Callable, alpha, smoothed: bool = False,
                    rng=None) -> PredictionSet:
    """Full (transductive) conformal prediction over a finite label space.

    For every candidate label the data set is augmented with ``(x, label)``
    and each point is scored by the model refit on all other points. The
    label is kept when its p-value is at least ``alpha``.
    """
    alpha = check_alpha(alpha)
    if label_space is None or not hasattr(label_space, "__len__"):
        raise ConfigError("transductive prediction needs a finite label space")
    labels = list(label_space)
    X, y = _xy(X, y)
    xq = np.asarray(x, dtype=float).reshape(1, X.shape[1])
    Xa = np.vstack([X, xq])
    n1 = Xa.shape[0]
    gen = as_generator(rng) if smoothed else None
    keep = []
    for label in labels:
        ya = np.append(y.astype(float) if y.dtype.kind != "O" else y, label)
        scores = np.empty(n1)
        for i in range(n1):
            mask = np.arange(n1) != i
            scorer = refit(Xa[mask], ya[mask])
            scores[i] = float(np.asarray(scorer(Xa[i:i + 1], ya[i:i + 1])).ravel()[0])
        s_new = scores[-1]
        if smoothed:
            tau = gen.random()
            p = (np.sum(scores > s_new) + tau * np.sum(scores == s_new)) / n1
        else:
            p = np.sum(scores >= s_new) / n1
        if p >= alpha:
            keep.append(label)
    return PredictionSet(frozenset(keep), alpha)


# ---------------------------------------------------------------------------
# cross-conformal


def _fold_inputs(fold_cal_scores, fold_test_scores):
    cal = [np.asarray(s, dtype=float).ravel() for s in fold_cal_scores]
    test = np.asarray(fold_test_scores, dtype=float)
    if test.shape[0] != len(cal):
        raise ValueError(f"{len(cal)} folds of scores but {test.shape[0]} test scores")
    if any(c.size == 0 for c in cal):
        raise ValueError("empty fold")
    return cal, test


def ccp_p_value(fold_cal_scores: Sequence, fold_test_scores):
    """Cross-conformal p-value.

    ``fold_cal_scores[s]`` are the held-out scores of fold ``s`` under the
    model fit without it; ``fold_test_scores[s]`` is the candidate's score
    under that same model (a scalar, or an array for many candidates).
    """
    cal, test = _fold_inputs(fold_cal_scores, fold_test_scores)
    total = sum(c.size for c in cal)
    count = sum(np.sum(c[:, None] >= np.atleast_1d(t)[None, :], axis=0) for c, t in zip(cal, test))
    p = (count + 1.0) / (total + 1.0)
    return float(p[0]) if test.ndim == 1 else p


def ccp_avg_p_value(fold_cal_scores: Sequence, fold_test_scores):
    """Sum over folds of per-fold strict-count p-values.

    Implemented verbatim; with many folds the value can exceed one.
    """
    cal, test = _fold_inputs(fold_cal_scores, fold_test_scores)
    p = sum((np.sum(c[:, None] > np.atleast_1d(t)[None, :], axis=0) + 1.0) / (c.size + 1.0)
            for c, t in zip(cal, test))
    return float(p[0]) if test.ndim == 1 else p


@dataclass(frozen=True)
class CcpFit:
    folds: FoldPlan
    scorers: tuple
    fold_scores: tuple

    def test_scores(self, x, candidates) -> np.ndarray:
        """(f, G) scores of ``x`` paired with each candidate label."""
        cand = np.asarray(candidates).ravel()
        xq = np.repeat(np.atleast_2d(np.asarray(x, dtype=float)), cand.size, axis=0)
        return np.vstack([np.asarray(sc(xq, cand), dtype=float).ravel() for sc in self.scorers])


def ccp_fit(X, y, folds: FoldPlan, refit: Callable) -> CcpFit:
    X, y = _xy(X, y)
    if len(folds) != y.size:
        raise ValueError(f"fold plan covers {len(folds)} rows but data has {y.size}")
    if folds.f < 2:
        raise ValueError("cross-conformal prediction needs at least two folds")
    scorers, fold_scores = [], []
    for s in range(1, folds.f + 1):
        out = folds.fold_of == s
        scorer = refit(X[~out], y[~out])
        scorers.append(scorer)
        fold_scores.append(np.asarray(scorer(X[out], y[out]), dtype=float).ravel())
    return CcpFit(folds, tuple(scorers), tuple(fold_scores))


def ccp_grid_p_values(fit: CcpFit, x, grid, averaged: bool = False) -> np.ndarray:
    t = fit.test_scores(x, grid)
    fn = ccp_avg_p_value if averaged else ccp_p_value
    return np.atleast_1d(fn(fit.fold_scores, t))


def ccp_grid_set(fit: CcpFit, x, grid, alpha, inclusive: bool = False) -> np.ndarray:
    """Candidates of ``grid`` accepted by cross-conformal prediction.

    The default rule keeps ``p > alpha``, the exact dual of ``score <= a*``
    used elsewhere; ``inclusive=True`` keeps ``p >= alpha`` instead.
    """
    alpha = check_alpha(alpha)
    grid = np.asarray(grid).ravel()
    p = ccp_grid_p_values(fit, x, grid)
    return grid[p >= alpha] if inclusive else grid[p > alpha]


# ---------------------------------------------------------------------------
# jackknife family


def _loo_models(X, y, refit, folds: FoldPlan):
    models = []
    for s in range(1, folds.f + 1):
        out = folds.fold_of == s
        if not np.any(~out):
            raise ValueError("a fold covering every row leaves no training data")
        models.append(refit(X[~out], y[~out]))
    return models


def _oof(X, y, refit, folds):
    """Out-of-fold residuals and the fold models."""
    models = _loo_models(X, y, refit, folds)
    pred = np.empty(y.size)
    for s, model in enumerate(models, start=1):
        rows = folds.rows(s)
        pred[rows] = np.asarray(model(X[rows]), dtype=float).ravel()
    return np.abs(y - pred), models


def _level(level):
    return min(max(level, 0.0), 1.0)


def jackknife_band(X, y, refit: Callable, x, alpha) -> ConformalBand:
    """Full-data prediction plus/minus the inflated quantile of leave-one-out
    residuals (level clamped to one)."""
    alpha = check_alpha(alpha)
    X, y = _xy(X, y)
    n = y.size
    if n < 2:
        raise ValueError("jackknife needs at least two points")
    resid, _ = _oof(X, y.astype(float), refit, leave_one_out_folds(n))
    level = _level((1.0 + 1.0 / n) * (1.0 - alpha))
    a = empirical_quantile(resid, level) if level > 0 else 0.0
    point = np.asarray(refit(X, y.astype(float))(_query(x, X.shape[1])), dtype=float).ravel()
    return _band(point - a, point + a, alpha, x)


def _band(lo, hi, alpha, x):
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    if np.ndim(x) <= 1 and lo.size == 1:
        return ConformalBand(float(lo[0]), float(hi[0]), alpha)
    return ConformalBand(lo, hi, alpha)


def _plus_band(resid, preds, alpha, strict_mode):
    """Columns of ``preds`` (n, m) are fold-model predictions at each query."""
    n = resid.size
    hi_level = (1.0 + 1.0 / n) * (1.0 - alpha)
    lo_level = (1.0 + 1.0 / n) * alpha
    lo_minus = np.sort(preds - resid[:, None], axis=0)
    hi_plus = np.sort(preds + resid[:, None], axis=0)
    if strict_mode and hi_level > 1.0 + 1e-12:
        m = preds.shape[1]
        return np.full(m, -np.inf), np.full(m, np.inf)
    k_hi = min(order_rank(n, _level(hi_level)), n) if hi_level > 0 else 1
    k_lo = min(max(math.floor(n * _level(lo_level) + 1e-9), 1), n)
    return lo_minus[k_lo - 1], hi_plus[k_hi - 1]


def jackknife_plus_band(X, y, refit: Callable, x, alpha, strict_mode: bool = False) -> ConformalBand:
    """Jackknife+ interval from leave-one-out predictions at ``x``.

    Quantile levels are clamped to ``(0, 1]``. With ``strict_mode`` an
    inflated upper level above one yields the whole real line instead.
    """
    X, y = _xy(X, y)
    if y.size < 2:
        raise ValueError("jackknife+ needs at least two points")
    return cv_plus_band(X, y, leave_one_out_folds(y.size), refit, x, alpha, strict_mode)


def cv_plus_band(X, y, folds: FoldPlan, refit: Callable, x, alpha, strict_mode: bool = False) -> ConformalBand:
    """CV+ interval: jackknife+ with out-of-fold predictions."""
    alpha = check_alpha(alpha)
    X, y = _xy(X, y)
    y = y.astype(float)
    if y.size < 2:
        raise ValueError("CV+ needs at least two points")
    if len(folds) != y.size:
        raise ValueError(f"fold plan covers {len(folds)} rows but data has {y.size}")
    if folds.f < 2:
        raise ValueError("CV+ needs at least two folds (one fold leaves no out-of-fold data)")
    resid, models = _oof(X, y, refit, folds)
    xq = _query(x, X.shape[1])
    fold_preds = np.vstack([np.asarray(m(xq), dtype=float).ravel() for m in models])
    preds = fold_preds[folds.fold_of - 1]
    lo, hi = _plus_band(resid, preds, alpha, strict_mode)
    return _band(lo, hi, alpha, x)


def oob_conformal_band(model, y, x, alpha) -> ConformalBand:
    """Out-of-bag band ``[yhat + q_{a/2}(E), yhat + q_{1-a/2}(E)]``.

    ``model`` provides ``oob_predictions()`` (NaN where a training row was
    never out of bag) and ``predict(X)``; ``E`` holds the signed OOB errors.
    """
    alpha = check_alpha(alpha)
    y = np.asarray(y, dtype=float).ravel()
    oob = np.asarray(model.oob_predictions(), dtype=float).ravel()
    if oob.size != y.size:
        raise DataError(f"{oob.size} OOB predictions but {y.size} responses")
    missing = np.isnan(oob)
    if missing.any():
        warnings.warn(f"{int(missing.sum())} training rows have no out-of-bag model; excluded", stacklevel=2)
    errors = np.sort(y[~missing] - oob[~missing])
    if errors.size == 0:
        raise DataError("no out-of-bag predictions available")
    lo_q = empirical_quantile(errors, alpha / 2, presorted=True) if alpha > 0 else errors[0]
    hi_q = empirical_quantile(errors, 1 - alpha / 2, presorted=True)
    point = np.asarray(model.predict(x), dtype=float).ravel()
    return _band(point + lo_q, point + hi_q, alpha, x)
