"""Nonconformity measures for regression and classification.

All functions are vectorized: fields of :class:`RegressionOutputs` and the
response ``y`` may be scalars or equally shaped arrays. Class labels are
``1..k``; probability vectors are indexed ``0..k-1`` along the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError, as_generator

__all__ = [
    "RegressionOutputs",
    "RapsConfig",
    "residual_score",
    "signed_residual_score",
    "normalized_score",
    "standardized_score",
    "interval_score",
    "zero_one_score",
    "binary_softmax_score",
    "softmax_score",
    "aps_score",
    "raps_score",
    "descending_rank",
    "check_probs",
]


def _num(v):
    out = np.asarray(v, dtype=float)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class RegressionOutputs:
    """Model outputs consumed by the regression scores.

    ``spread`` is the difficulty (a standard deviation estimate or any
    positive scale); ``lower``/``upper`` are model-produced interval bounds.
    """

    point: object = None
    spread: object = None
    lower: object = None
    upper: object = None

    def __post_init__(self):
        for name in ("point", "spread", "lower", "upper"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _num(v))
        if self.spread is not None and np.any(np.asarray(self.spread) <= 0):
            raise DataError("nonpositive difficulty")
        if self.lower is not None and self.upper is not None:
            if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
                raise DataError("lower bound exceeds upper bound")

    def _need(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise DataError(f"score requires model output {name!r}")


@dataclass(frozen=True)
class RapsConfig:
    lam: float = 0.0
    k_reg: int = 0
    randomized: bool = False
    rank: str = "descending"

    def __post_init__(self):
        if self.lam < 0 or self.k_reg < 0:
            raise ValueError("RAPS lambda and k_reg must be nonnegative")
        if self.rank not in ("descending", "ascending"):
            raise ValueError(f"unknown rank order {self.rank!r}")


# ---------------------------------------------------------------------------
# regression


def residual_score(out: RegressionOutputs, y):
    out._need("point")
    return _num(np.abs(out.point - np.asarray(y, dtype=float)))


def signed_residual_score(out: RegressionOutputs, y):
    out._need("point")
    return _num(np.asarray(y, dtype=float) - out.point)


def normalized_score(out: RegressionOutputs, y):
    out._need("point", "spread")
    return _num(np.abs(out.point - np.asarray(y, dtype=float)) / out.spread)


def standardized_score(out: RegressionOutputs, y):
    out._need("point", "spread")
    return _num((np.asarray(y, dtype=float) - out.point) / out.spread)


def interval_score(out: RegressionOutputs, y):
    """``max(lower - y, y - upper)``; nonpositive exactly inside the interval."""
    out._need("lower", "upper")
    y = np.asarray(y, dtype=float)
    return _num(np.maximum(out.lower - y, y - out.upper))


# ---------------------------------------------------------------------------
# classification


def zero_one_score(predicted_class, y):
    # mismatch is the nonconforming case; see README for the sign convention
    return _num(np.asarray(predicted_class) != np.asarray(y))


def binary_softmax_score(rho, y):
    """Two-class score for a model predicting ``P(y = 1)``; labels are 0/1."""
    rho = np.asarray(rho, dtype=float)
    y = np.asarray(y)
    if np.any((y != 0) & (y != 1)):
        raise DataError("binary labels must be 0 or 1")
    return _num(np.where(y == 0, rho, 1.0 - rho))


def check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.ndim not in (1, 2):
        raise DataError("class probabilities must be a vector or a matrix")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise DataError("class probabilities must be nonnegative and sum to 1")
    return p


def _label_index(p: np.ndarray, y) -> np.ndarray:
    y = np.asarray(y)
    k = p.shape[-1]
    if np.any(y < 1) or np.any(y > k) or np.any(y != np.round(y)):
        raise DataError(f"class label out of range 1..{k}")
    return y.astype(int) - 1


def _pick(mat: np.ndarray, p: np.ndarray, y):
    """Select per-row entries of an (n, k) (or (k,)) matrix, or return all."""
    if y is None:
        return mat
    idx = _label_index(p, y)
    if mat.ndim == 1:
        return _num(mat[idx])
    idx = np.broadcast_to(idx, mat.shape[:1])
    return mat[np.arange(mat.shape[0]), idx]


def softmax_score(probs, y=None):
    """``1 - probs[y]``; with ``y=None`` scores for every label are returned."""
    p = check_probs(probs)
    return _pick(1.0 - p, p, y)


def descending_rank(probs) -> np.ndarray:
    """Rank of each label when sorted by decreasing probability (1 = top).

    Ties go to the lower class index first.
    """
    p = check_probs(probs)
    order = np.argsort(-p, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(1, p.shape[-1] + 1) * np.ones_like(order), axis=-1)
    return rank


def _aps_parts(p: np.ndarray):
    # mass strictly ahead of each label in the descending order, and its own mass
    order = np.argsort(-p, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(p, order, axis=-1)
    ahead_sorted = np.cumsum(sorted_p, axis=-1) - sorted_p
    ahead = np.empty_like(p)
    np.put_along_axis(ahead, order, ahead_sorted, axis=-1)
    return ahead, p


def _draw_u(p: np.ndarray, rng, randomized: bool):
    if not randomized:
        return 1.0
    u = as_generator(rng).random(p.shape[:-1])
    return u[..., None] if p.ndim == 2 else float(u)


def aps_score(probs, y=None, rng=None, randomized: bool = False):
    """Adaptive prediction set score.

    Deterministic form: total probability of labels ranked at or above ``y``.
    Randomized form replaces the own-mass term by ``U * probs[y]``, with one
    uniform draw per row shared by every candidate label.
    """
    p = check_probs(probs)
    ahead, own = _aps_parts(p)
    u = _draw_u(p, rng, randomized)
    return _pick(ahead + u * own, p, y)


def raps_score(probs, y=None, cfg: RapsConfig = RapsConfig(), rng=None):
    """APS score plus ``lam * max(0, rank - k_reg)``; ``rank`` is descending
    (1 = most probable) unless ``cfg.rank == "ascending"``."""
    p = check_probs(probs)
    ahead, own = _aps_parts(p)
    u = _draw_u(p, rng, cfg.randomized)
    rank = descending_rank(p)
    if cfg.rank == "ascending":
        rank = p.shape[-1] + 1 - rank
    penalty = cfg.lam * np.maximum(0, rank - cfg.k_reg)
    return _pick(ahead + u * own + penalty, p, y)
