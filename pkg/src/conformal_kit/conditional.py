"""Taxonomies and Mondrian (class-conditional) conformal calibration."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .calibrate import (
    Calibration,
    ConformalBand,
    band_interval,
    band_normalized,
    band_point,
    critical_score,
)
from .core import DataError, check_alpha, empirical_quantile
from .scores import RegressionOutputs

__all__ = [
    "BinRule",
    "Taxonomy",
    "MondrianCalibration",
    "equal_frequency_bins",
    "mondrian_fit",
    "mondrian_predict_band",
    "by_label",
    "by_feature_threshold",
    "by_binned_difficulty",
]


@dataclass(frozen=True)
class BinRule:
    """Bins ``1..k`` delimited by ascending edges; ``v`` goes to the first
    bin whose edge is ``>= v``."""

    edges: tuple

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("bin edges must be strictly ascending")
        object.__setattr__(self, "edges", edges)

    @property
    def k(self) -> int:
        return len(self.edges) + 1

    def assign(self, values):
        idx = np.searchsorted(np.asarray(self.edges), np.asarray(values, dtype=float), side="left")
        return idx + 1 if np.ndim(idx) else int(idx) + 1


def equal_frequency_bins(values, k: int) -> BinRule:
    """Edges at the ``j/k`` empirical quantiles, ``j = 1..k-1``.

    Repeated edges (heavy ties) are merged, so the rule may have fewer than
    ``k`` bins.
    """
    arr = np.sort(np.asarray(values, dtype=float).ravel())
    if arr.size == 0:
        raise ValueError("empty sample")
    if k < 1:
        raise ValueError("need at least one bin")
    if k > arr.size:
        raise ValueError("more bins than points")
    edges = [empirical_quantile(arr, j / k, presorted=True) for j in range(1, k)]
    return BinRule(tuple(sorted(set(edges))))


@dataclass(frozen=True)
class Taxonomy:
    """Maps instances (feature rows, optionally with responses) to ``1..k``."""

    assign: Callable
    k: int
    kind: str = "by-feature"

    def __call__(self, features, responses=None):
        return np.asarray(self.assign(features, responses), dtype=int)


def by_label(k: int) -> Taxonomy:
    return Taxonomy(lambda X, y: np.asarray(y, dtype=int), k, "by-label")


def by_feature_threshold(column: int, edges) -> Taxonomy:
    rule = BinRule(tuple(edges))
    return Taxonomy(lambda X, y=None: rule.assign(np.asarray(X)[:, column]), rule.k, "by-feature-column")


def by_binned_difficulty(rule: BinRule, difficulty: Callable) -> Taxonomy:
    """Classes from binning a difficulty estimate ``difficulty(X)``."""
    return Taxonomy(lambda X, y=None: rule.assign(difficulty(X)), rule.k, "by-binned-difficulty")


@dataclass(frozen=True)
class MondrianCalibration:
    calibrations: dict
    alpha: float
    k: int
    empty: tuple = ()

    def a_star(self, c) -> float:
        c = int(c)
        if c not in self.calibrations:
            if 1 <= c <= self.k:
                return np.inf
            raise DataError(f"unknown taxonomy class {c}")
        return self.calibrations[c].a_star

    def a_stars(self, classes) -> np.ndarray:
        classes = np.asarray(classes, dtype=int)
        table = {c: self.a_star(c) for c in np.unique(classes)}
        return np.array([table[c] for c in classes.ravel()]).reshape(classes.shape)


def mondrian_fit(scores, classes, alpha, k: int | None = None, strict_mode: bool = True) -> MondrianCalibration:
    """Per-class calibration. Classes without data get an infinite critical
    score and a warning."""
    scores = np.asarray(scores, dtype=float).ravel()
    classes = np.asarray(classes).ravel()
    if scores.shape != classes.shape:
        raise ValueError(f"{scores.size} scores but {classes.size} class labels")
    alpha = check_alpha(alpha)
    classes = classes.astype(int)
    present = sorted(int(c) for c in np.unique(classes))
    if k is None:
        k = max(present) if present else 0
    cals = {c: Calibration(scores[classes == c], alpha, strict_mode) for c in present}
    for c in cals.values():
        critical_score(c)
    empty = tuple(c for c in range(1, k + 1) if c not in cals)
    if empty:
        warnings.warn(f"taxonomy classes without calibration data: {list(empty)}", stacklevel=2)
    return MondrianCalibration(cals, alpha, k, empty)


def mondrian_predict_band(outputs: RegressionOutputs, classes, mcal: MondrianCalibration,
                          band_kind: str = "point") -> ConformalBand:
    """Bands using each row's class-specific critical score.

    ``band_kind`` is ``point`` (residual score), ``normalized`` or ``interval``.
    """
    a = mcal.a_stars(classes)
    if a.ndim == 0:
        a = float(a)
    if band_kind == "point":
        return _vector_band(lambda aa: band_point(outputs.point, aa), outputs.point, a, mcal.alpha)
    if band_kind == "normalized":
        return _vector_band(lambda aa: band_normalized(outputs.point, outputs.spread, aa), outputs.point, a, mcal.alpha)
    if band_kind == "interval":
        return _vector_band(lambda aa: band_interval(outputs.lower, outputs.upper, aa), outputs.lower, a, mcal.alpha)
    raise ValueError(f"unknown band kind {band_kind!r}")


def _vector_band(make, ref, a, alpha) -> ConformalBand:
    if np.ndim(a) == 0:
        b = make(a)
        return ConformalBand(b.lo, b.hi, alpha, b.degenerate)
    shape = np.broadcast_shapes(np.shape(ref), np.shape(a))
    lo, hi = np.empty(shape), np.empty(shape)
    deg = np.zeros(shape, dtype=bool)
    for val in np.unique(a):
        sel = a == val
        b = make(val)
        lo[sel] = np.broadcast_to(b.lo, shape)[sel]
        hi[sel] = np.broadcast_to(b.hi, shape)[sel]
        deg[sel] = np.broadcast_to(np.asarray(b.degenerate, dtype=bool), shape)[sel]
    return ConformalBand(lo, hi, alpha, deg)
