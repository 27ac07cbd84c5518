"""Inductive conformal calibration: critical scores, p-values and regions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import as_generator, check_alpha, order_rank

__all__ = [
    "Calibration",
    "ConformalBand",
    "PredictionSet",
    "critical_rank",
    "critical_score",
    "p_value",
    "smoothed_p_value",
    "band_point",
    "band_normalized",
    "band_interval",
    "predict_set",
    "predict_set_mask",
    "cps_cdf",
    "online_append",
]


def _scores(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if np.any(np.isnan(arr)):
        raise ValueError("scores contain NaN")
    return arr


@dataclass(frozen=True)
class Calibration:
    """Calibration scores at a fixed significance level.

    Scores are stored sorted, so repeated critical-score lookups index into
    the same array. ``strict_mode`` returns an infinite critical score when
    the inflated level exceeds one; otherwise the level is clamped to one.
    """

    scores: np.ndarray
    alpha: float = 0.1
    strict_mode: bool = True
    _a_star: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "scores", np.sort(_scores(self.scores)))
        object.__setattr__(self, "alpha", check_alpha(self.alpha))

    def __len__(self) -> int:
        return self.scores.size

    @property
    def a_star(self) -> float:
        if not self._a_star:
            self._a_star.append(critical_score(self))
        return self._a_star[0]

    def with_alpha(self, alpha: float) -> "Calibration":
        return Calibration(self.scores, alpha, self.strict_mode)


def critical_rank(n: int, alpha: float) -> int:
    """Rank of the inflated quantile ``(1 - alpha)(1 + 1/n)``; may exceed ``n``."""
    return order_rank(n, (1.0 - alpha) * (n + 1) / n)


def critical_score(cal: Calibration) -> float:
    n = len(cal)
    if n == 0:
        raise ValueError("empty calibration set")
    if cal.alpha >= 1.0:
        # level 0: nothing is ever accepted
        return -math.inf
    k = critical_rank(n, cal.alpha)
    if k > n:
        if cal.strict_mode:
            return math.inf
        k = n
    return float(cal.scores[k - 1])


def _counts(sorted_cal: np.ndarray, test):
    test = np.asarray(test, dtype=float)
    n = sorted_cal.size
    n_lt = np.searchsorted(sorted_cal, test, side="left")
    n_le = np.searchsorted(sorted_cal, test, side="right")
    return n, n_lt, n_le


def _out(v):
    return float(v) if np.ndim(v) == 0 else v


def p_value(cal_scores, test_score):
    """``(#{cal >= test} + 1) / (n + 1)``."""
    cal = np.sort(_scores(cal_scores))
    if cal.size == 0:
        raise ValueError("empty calibration set")
    n, n_lt, _ = _counts(cal, test_score)
    return _out((n - n_lt + 1) / (n + 1))


def smoothed_p_value(cal_scores, test_score, rng=None, tau=None):
    """Randomized p-value ``(#{cal > t} + tau (#{cal = t} + 1)) / (n + 1)``.

    ``tau`` is drawn uniformly (one draw per test score) unless given.
    """
    cal = np.sort(_scores(cal_scores))
    if cal.size == 0:
        raise ValueError("empty calibration set")
    n, n_lt, n_le = _counts(cal, test_score)
    if tau is None:
        tau = as_generator(rng).random(np.shape(test_score))
    return _out(((n - n_le) + tau * (n_le - n_lt + 1)) / (n + 1))


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class ConformalBand:
    """Closed interval ``[lo, hi]``; fields may be arrays (one band per row)."""

    lo: object
    hi: object
    alpha: float | None = None
    degenerate: object = False

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        empty = np.asarray(self.degenerate, dtype=bool)
        if np.any((lo > hi) & ~empty):
            raise ValueError("band lower end exceeds upper end")
        object.__setattr__(self, "lo", _out(lo))
        object.__setattr__(self, "hi", _out(hi))

    @property
    def width(self):
        w = np.asarray(self.hi) - np.asarray(self.lo)
        return _out(np.where(np.asarray(self.degenerate, dtype=bool), 0.0, w))

    def contains(self, y):
        y = np.asarray(y, dtype=float)
        inside = (np.asarray(self.lo) <= y) & (y <= np.asarray(self.hi))
        return _out(inside & ~np.asarray(self.degenerate, dtype=bool))

    def __len__(self):
        return np.size(self.lo)

    def __getitem__(self, i) -> "ConformalBand":
        deg = np.broadcast_to(np.asarray(self.degenerate, dtype=bool), np.shape(self.lo))
        return ConformalBand(np.asarray(self.lo)[i], np.asarray(self.hi)[i], self.alpha, deg[i])


@dataclass(frozen=True)
class PredictionSet:
    labels: frozenset
    alpha: float | None = None

    def __contains__(self, y) -> bool:
        return int(y) in self.labels

    def __len__(self) -> int:
        return len(self.labels)


def band_point(point, a_star, alpha=None) -> ConformalBand:
    point = np.asarray(point, dtype=float)
    if np.isinf(a_star):
        if a_star > 0:
            return ConformalBand(np.full_like(point, -np.inf), np.full_like(point, np.inf), alpha)
        return ConformalBand(point, point, alpha, np.ones(point.shape, dtype=bool))
    return ConformalBand(point - a_star, point + a_star, alpha)


def band_normalized(point, spread, a_star, alpha=None) -> ConformalBand:
    point = np.asarray(point, dtype=float)
    spread = np.asarray(spread, dtype=float)
    if np.any(spread <= 0):
        raise ValueError("nonpositive difficulty")
    if np.isinf(a_star):
        return band_point(point + 0 * spread, a_star, alpha)
    return ConformalBand(point - a_star * spread, point + a_star * spread, alpha)


def band_interval(lower, upper, a_star, alpha=None) -> ConformalBand:
    """Widen (or, for negative ``a_star``, shrink) model interval bounds.

    When shrinking would make the ends cross, the band collapses to the
    midpoint and is flagged ``degenerate`` (it then contains nothing).
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    if np.isinf(a_star):
        return band_point(0.5 * (lower + upper), a_star, alpha)
    lo, hi = lower - a_star, upper + a_star
    crossed = lo > hi
    mid = 0.5 * (lower + upper)
    lo = np.where(crossed, mid, lo)
    hi = np.where(crossed, mid, hi)
    return ConformalBand(lo, hi, alpha, crossed if crossed.ndim else bool(crossed))


def predict_set_mask(label_scores, a_star) -> np.ndarray:
    """Boolean membership ``score <= a_star`` for an (n, k) score matrix."""
    return np.asarray(label_scores, dtype=float) <= a_star


def predict_set(label_scores, a_star, alpha=None) -> PredictionSet:
    """Labels (``1..k``) whose score does not exceed ``a_star``.

    ``label_scores`` is either the sequence of per-label scores or a
    callable mapping a label to its score (then ``k`` must be known through
    ``len``-able ``label_scores.labels``).
    """
    if callable(label_scores):
        labels = getattr(label_scores, "labels")
        scores = [label_scores(c) for c in labels]
    else:
        scores = list(np.asarray(label_scores, dtype=float).ravel())
        labels = range(1, len(scores) + 1)
    return PredictionSet(frozenset(int(c) for c, s in zip(labels, scores) if s <= a_star), alpha)


def cps_cdf(cal_signed_residuals, point, y, tau):
    """Randomized conformal predictive distribution for signed residuals."""
    cal = np.sort(_scores(cal_signed_residuals))
    if cal.size == 0:
        raise ValueError("empty calibration set")
    r = np.asarray(y, dtype=float) - np.asarray(point, dtype=float)
    n, n_lt, n_le = _counts(cal, r)
    return _out((n_lt + tau * (n_le - n_lt + 1)) / (n + 1))


def online_append(cal: Calibration, new_score) -> Calibration:
    scores = np.concatenate([cal.scores, np.atleast_1d(np.asarray(new_score, dtype=float))])
    return Calibration(scores, cal.alpha, cal.strict_mode)
