"""Validity and efficiency metrics for prediction regions, plus predictive
quality scores."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .calibrate import ConformalBand, PredictionSet
from .core import DataError, empirical_quantile

__all__ = [
    "coverage",
    "covered",
    "conditional_coverage",
    "GroupedMetric",
    "avg_width",
    "region_sizes",
    "relative_width",
    "r_squared",
    "classification_metrics",
    "EvalReport",
    "evaluate",
]


def covered(regions, truths) -> np.ndarray:
    """Boolean membership of each truth in its region (closed intervals).

    ``regions`` is a :class:`ConformalBand` with one band per row, a
    sequence of :class:`PredictionSet`, or an (n, k) boolean label mask for
    labels ``1..k``.
    """
    truths = np.asarray(truths).ravel()
    if isinstance(regions, ConformalBand):
        if len(regions) != truths.size:
            raise DataError(f"{len(regions)} regions but {truths.size} truths")
        return np.atleast_1d(regions.contains(truths.astype(float)))
    if isinstance(regions, np.ndarray) and regions.ndim == 2:
        if regions.shape[0] != truths.size:
            raise DataError(f"{regions.shape[0]} regions but {truths.size} truths")
        idx = truths.astype(int) - 1
        if np.any(idx < 0) or np.any(idx >= regions.shape[1]):
            raise DataError(f"label out of range 1..{regions.shape[1]}")
        return regions[np.arange(truths.size), idx].astype(bool)
    regions = list(regions)
    if len(regions) != truths.size:
        raise DataError(f"{len(regions)} regions but {truths.size} truths")
    return np.array([t in r for r, t in zip(regions, truths.tolist())], dtype=bool)


def coverage(regions, truths) -> float:
    hits = covered(regions, truths)
    if hits.size == 0:
        raise DataError("no evaluation points")
    return float(hits.mean())


@dataclass(frozen=True)
class GroupedMetric:
    """Per-class values, class sizes and classes that had no rows."""

    values: dict
    counts: dict
    empty: tuple = ()

    def __getitem__(self, c):
        return self.values[c]


def conditional_coverage(regions, truths, classes, k: int | None = None) -> GroupedMetric:
    hits = covered(regions, truths)
    classes = np.asarray(classes).ravel()
    if classes.size != hits.size:
        raise DataError(f"{classes.size} class labels but {hits.size} truths")
    present = sorted(int(c) for c in np.unique(classes))
    values = {c: float(hits[classes == c].mean()) for c in present}
    counts = {c: int(np.sum(classes == c)) for c in present}
    empty = tuple(c for c in range(1, (k or 0) + 1) if c not in values)
    return GroupedMetric(values, counts, empty)


def region_sizes(regions) -> np.ndarray:
    """Interval widths (degenerate bands count as zero) or set sizes."""
    if isinstance(regions, ConformalBand):
        return np.atleast_1d(np.asarray(regions.width, dtype=float))
    if isinstance(regions, np.ndarray) and regions.ndim == 2:
        return regions.sum(axis=1).astype(float)
    return np.array([len(r) for r in regions], dtype=float)


def avg_width(regions) -> tuple[float, int]:
    """Mean region size and the number of infinite regions (the mean is
    infinite whenever that number is positive)."""
    sizes = region_sizes(regions)
    if sizes.size == 0:
        raise DataError("no regions")
    n_inf = int(np.sum(np.isinf(sizes)))
    return (math.inf if n_inf else float(sizes.mean())), n_inf


def relative_width(regions, truths, alpha: float) -> float:
    """Average width divided by the gap between the ``1 - alpha/2`` and
    ``alpha/2`` quantiles of the truths."""
    truths = np.sort(np.asarray(truths, dtype=float).ravel())
    hi = empirical_quantile(truths, 1 - alpha / 2, presorted=True)
    lo = empirical_quantile(truths, alpha / 2, presorted=True) if alpha > 0 else truths[0]
    gap = hi - lo
    if gap <= 0:
        raise DataError("zero quantile gap")
    return avg_width(regions)[0] / gap


def r_squared(preds, truths) -> float:
    preds = np.asarray(preds, dtype=float).ravel()
    truths = np.asarray(truths, dtype=float).ravel()
    if preds.size != truths.size:
        raise DataError(f"{preds.size} predictions but {truths.size} truths")
    ss_tot = np.sum((truths - truths.mean()) ** 2)
    if ss_tot == 0:
        raise DataError("constant truths: R^2 undefined")
    return float(1.0 - np.sum((truths - preds) ** 2) / ss_tot)


def classification_metrics(preds, truths, k: int) -> tuple[float, float, float]:
    """Accuracy, balanced accuracy (macro-averaged recall over classes that
    occur in ``truths``) and support-weighted F1."""
    preds = np.asarray(preds).ravel().astype(int)
    truths = np.asarray(truths).ravel().astype(int)
    if preds.size != truths.size:
        raise DataError(f"{preds.size} predictions but {truths.size} truths")
    if preds.size == 0:
        raise DataError("no evaluation points")
    for name, arr in (("prediction", preds), ("truth", truths)):
        if np.any(arr < 1) or np.any(arr > k):
            raise DataError(f"{name} label out of range 1..{k}")
    conf = np.zeros((k, k))
    np.add.at(conf, (truths - 1, preds - 1), 1.0)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    tp = np.diag(conf)
    acc = float(tp.sum() / preds.size)
    present = support > 0
    recall = np.divide(tp, support, out=np.zeros(k), where=present)
    precision = np.divide(tp, predicted, out=np.zeros(k), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(k), where=denom > 0)
    bacc = float(recall[present].mean())
    f1w = float(np.sum(f1 * support) / support.sum())
    return acc, bacc, f1w


@dataclass
class EvalReport:
    """Rows of ``(metric, group, value)``; ``group`` is ``all`` for
    marginal metrics."""

    rows: list = field(default_factory=list)

    def add(self, metric: str, value, group="all") -> None:
        self.rows.append((metric, str(group), float(value)))

    def get(self, metric: str, group="all") -> float:
        for m, g, v in self.rows:
            if m == metric and g == str(group):
                return v
        raise KeyError((metric, group))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "group", "value"])
            for m, g, v in self.rows:
                w.writerow([m, g, repr(v)])


def evaluate(regions, truths, classes=None, alpha: float | None = None,
             points: Sequence | None = None) -> EvalReport:
    """Coverage and size metrics, per class when ``classes`` is given.

    ``points`` (regression point predictions) adds R^2; ``alpha`` adds the
    relative width for interval regions.
    """
    report = EvalReport()
    report.add("coverage", coverage(regions, truths))
    width, n_inf = avg_width(regions)
    report.add("avg_width", width)
    report.add("n_infinite", n_inf)
    if alpha is not None and isinstance(regions, ConformalBand) and n_inf == 0:
        report.add("relative_width", relative_width(regions, truths, alpha))
    if points is not None:
        report.add("r_squared", r_squared(points, truths))
    if classes is not None:
        classes = np.asarray(classes).ravel()
        cc = conditional_coverage(regions, truths, classes)
        sizes = region_sizes(regions)
        for c, v in cc.values.items():
            report.add("coverage", v, c)
            sel = sizes[classes == c]
            report.add("avg_width", math.inf if np.any(np.isinf(sel)) else float(sel.mean()), c)
            report.add("count", cc.counts[c], c)
    return report
