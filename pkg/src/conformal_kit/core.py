"""Datasets, seeded randomness, order-statistic quantiles and beta functions.

Everything else in the package builds on the quantile convention defined
here: the level-``q`` quantile of ``n`` values is the ascending order
statistic at rank ``ceil(n * q)``. No interpolation is ever applied.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

__all__ = [
    "ConformalError",
    "ConfigError",
    "DataError",
    "NumericError",
    "Dataset",
    "Split",
    "SeededRng",
    "check_alpha",
    "order_rank",
    "empirical_quantile",
    "lower_quantile",
    "reg_inc_beta",
    "beta_quantile",
    "split",
    "read_csv",
    "parallel_map",
]

# Slack for ceil/floor of n * level: products such as 19 * (0.9 * 20 / 19)
# land a few ulps above an integer and must not jump to the next rank.
_RANK_EPS = 1e-9


class ConformalError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(ConformalError, ValueError):
    pass


class DataError(ConformalError, ValueError):
    pass


class NumericError(ConformalError, ArithmeticError):
    pass


def check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0 or math.isnan(alpha):
        raise ValueError(f"significance level must lie in [0, 1], got {alpha}")
    return alpha


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus responses.

    Classification responses are integer labels in ``1..k``.
    """

    features: np.ndarray
    responses: np.ndarray
    kind: str = "regression"

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DataError("features must be a 2-d matrix")
        y = np.asarray(self.responses)
        if y.ndim != 1:
            raise DataError("responses must be a vector")
        if X.shape[0] != y.shape[0]:
            raise DataError(
                f"{X.shape[0]} feature rows but {y.shape[0]} responses"
            )
        if not np.all(np.isfinite(X)):
            raise DataError("features contain NaN or Inf")
        if self.kind == "regression":
            y = y.astype(float)
            if not np.all(np.isfinite(y)):
                raise DataError("responses contain NaN or Inf")
        elif self.kind == "classification":
            yf = y.astype(float)
            if not np.all(np.isfinite(yf)) or np.any(yf != np.round(yf)):
                raise DataError("class labels must be integers")
            y = yf.astype(int)
            if y.size and y.min() < 1:
                raise DataError("class labels must be >= 1")
        else:
            raise DataError(f"unknown dataset kind {self.kind!r}")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "responses", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        if self.kind != "classification":
            raise DataError("n_classes is only defined for classification data")
        return int(self.responses.max()) if len(self) else 0

    def take(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.features[index], self.responses[index], self.kind)


@dataclass(frozen=True)
class Split:
    train: Dataset
    calibration: Dataset
    test: Dataset
    train_index: np.ndarray
    calibration_index: np.ndarray
    test_index: np.ndarray


# ---------------------------------------------------------------------------
# randomness


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("substream keys must be nonnegative")
        return int(key) & 0xFFFFFFFF if key < 2**32 else _key_to_int(str(key))
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


@dataclass
class SeededRng:
    """Counter-based (Philox) random stream with named substreams.

    ``SeededRng(7).child("smoothing").child(3)`` always yields the same
    stream, independent of how many draws were taken from the parent or from
    sibling substreams. Draw through :attr:`gen`, a :class:`numpy.random.Generator`.
    """

    seed: int
    path: tuple[int, ...] = ()
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        seed = int(self.seed)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = seed
        self.path = tuple(int(p) for p in self.path)

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def child(self, key) -> "SeededRng":
        return SeededRng(self.seed, self.path + (_key_to_int(key),))

    def uniform(self, size=None):
        return self.gen.random(size)


def as_generator(rng) -> np.random.Generator:
    """Accept a SeededRng, a numpy Generator or an integer seed."""
    if isinstance(rng, SeededRng):
        return rng.gen
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return SeededRng(0 if rng is None else int(rng)).gen
    raise TypeError(f"cannot use {type(rng).__name__} as a random stream")


# ---------------------------------------------------------------------------
# quantiles


def order_rank(n: int, level: float) -> int:
    """Rank ``ceil(n * level)`` used by the empirical quantile."""
    return max(1, math.ceil(n * level - _RANK_EPS))


def _as_sample(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("empty sample")
    if np.any(np.isnan(arr)):
        raise DataError("sample contains NaN")
    return arr


def empirical_quantile(values, level: float, *, presorted: bool = False) -> float:
    """Ascending order statistic at rank ``ceil(n * level)``.

    Parameters
    ----------
    values : array-like
        Nonempty sample. Duplicates occupy consecutive ranks.
    level : float
        Quantile level in ``(0, 1]``.
    presorted : bool, default=False
        Skip sorting when ``values`` is already ascending.
    """
    arr = _as_sample(values)
    if not level > 0:
        raise ValueError(f"quantile level must be positive, got {level}")
    if level > 1:
        raise ValueError(f"quantile level must be at most 1, got {level}")
    k = order_rank(arr.size, level)
    if presorted:
        return float(arr[k - 1])
    return float(np.partition(arr, k - 1)[k - 1])


def lower_quantile(values, level: float) -> float:
    """Lower counterpart of :func:`empirical_quantile`.

    Returns the order statistic at rank ``floor(n * level)``, clamped to
    ``[1, n]``. This is the rank used for the lower endpoint of jackknife+
    style intervals, so that ``lower_quantile(S, q) <= empirical_quantile(S, q)``.
    """
    arr = _as_sample(values)
    level = min(max(float(level), 0.0), 1.0)
    k = math.floor(arr.size * level + _RANK_EPS)
    k = min(max(k, 1), arr.size)
    return float(np.partition(arr, k - 1)[k - 1])


# ---------------------------------------------------------------------------
# beta functions


def _betacf(x: float, a: float, b: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise NumericError(f"incomplete beta did not converge for a={a}, b={b}")


def reg_inc_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta function ``I_x(a, b)``."""
    x, a, b = float(x), float(a), float(b)
    if not (0.0 <= x <= 1.0):
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if not (a > 0 and b > 0) or math.isinf(a) or math.isinf(b):
        raise ValueError(f"shape parameters must be positive and finite, got {a}, {b}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return min(1.0, front * _betacf(x, a, b) / a)
    return max(0.0, 1.0 - front * _betacf(1.0 - x, b, a) / b)


def beta_quantile(p: float, a: float, b: float, tol: float = 1e-12) -> float:
    """Inverse of :func:`reg_inc_beta` in ``x``, by bisection."""
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {p}")
    if not (a > 0 and b > 0):
        raise ValueError("shape parameters must be positive")
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if reg_inc_beta(mid, a, b) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# splitting and ingestion


def split(data: Dataset, fractions: Sequence[float], rng) -> Split:
    """Random train/calibration/test partition.

    Calibration and test receive ``floor(n * fraction)`` rows; every
    remaining row goes to the training part.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    n = len(data)
    if n < int(np.count_nonzero(fr)):
        raise DataError(f"{n} rows cannot fill {np.count_nonzero(fr)} nonempty parts")
    n_cal = math.floor(n * fr[1] + _RANK_EPS)
    n_test = math.floor(n * fr[2] + _RANK_EPS)
    n_train = n - n_cal - n_test
    perm = as_generator(rng).permutation(n)
    tr = np.sort(perm[:n_train])
    ca = np.sort(perm[n_train:n_train + n_cal])
    te = np.sort(perm[n_train + n_cal:])
    return Split(data.take(tr), data.take(ca), data.take(te), tr, ca, te)


def read_csv(path, kind: str | None = None) -> Dataset:
    """Read a dataset with columns ``x1..xd`` and ``y`` (or ``label``)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        xcols = sorted(
            (i for i, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()),
            key=lambda i: int(header[i][1:]),
        )
        if "y" in header and "label" in header:
            raise DataError(f"{path}: both 'y' and 'label' columns present")
        if "y" in header:
            ycol, found = header.index("y"), "regression"
        elif "label" in header:
            ycol, found = header.index("label"), "classification"
        else:
            raise DataError(f"{path}: no 'y' or 'label' column")
        if kind is not None and kind != found:
            raise DataError(f"{path}: expected {kind} data but found column {header[ycol]!r}")
        if not xcols:
            raise DataError(f"{path}: no feature columns x1..xd")
        rows_x, rows_y = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header) or any(row[i].strip() == "" for i in xcols + [ycol]):
                raise DataError(f"{path}: line {lineno}: missing field")
            try:
                rows_x.append([float(row[i]) for i in xcols])
                rows_y.append(float(row[ycol]))
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    X = np.asarray(rows_x, dtype=float).reshape(len(rows_x), len(xcols))
    return Dataset(X, np.asarray(rows_y), found)


def write_dataset(path, data: Dataset) -> None:
    ycol = "y" if data.kind == "regression" else "label"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j + 1}" for j in range(data.dim)] + [ycol])
        for xrow, yv in zip(data.features, data.responses):
            w.writerow([repr(float(v)) for v in xrow] + [repr(float(yv)) if data.kind == "regression" else int(yv)])


# ---------------------------------------------------------------------------
# parallelism

T = TypeVar("T")
R = TypeVar("R")


def thread_count(threads: int | None = None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("CONFORMAL_KIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"CONFORMAL_KIT_THREADS must be an integer, got {env!r}") from None
    return 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """Order-preserving map; results never depend on the thread count."""
    items = list(items)
    n = thread_count(threads)
    if n == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
