"""Synthetic data generators, misspecification injectors and diagnostics.

Every generator returns a :class:`SyntheticSample` carrying the data set
together with the true conditional mean and spread of each row, so oracle
models can be built for validity experiments.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .cluster import ks_distance
from .core import Dataset, DataError, as_generator, beta_quantile, order_rank, reg_inc_beta
from .models import OracleModel
from .scores import RegressionOutputs

__all__ = [
    "FAMILIES",
    "NOISES",
    "GeneratorSpec",
    "SyntheticSample",
    "generate",
    "standard_noise",
    "MisspecSpec",
    "misspecify",
    "cdf_curves",
    "hd_weights",
    "hd_quantile",
    "bootstrap_quantile_test",
    "beta_coverage_band",
    "ks_band_99",
    "pivotality_check",
]

FAMILIES = ("type1", "type2", "type3", "type4", "naval-like", "sum-normal", "triangular", "exp-mean")
NOISES = ("normal", "laplace", "uniform", "exponential", "triangular")

_DEFAULTS = {
    "type1": {"mean": 0.0, "sigma0": 1.0, "slope": 0.0},
    "type2": {"cv": 0.1},
    "type3": {"sigma0": 0.1, "slope": 1.0},
    "type4": {"cv": 0.1, "split": 2.0, "offset": 1.0, "low": 0.0, "high": 4.0},
    "naval-like": {"noise": 0.01},
    "sum-normal": {},
    "triangular": {"lam0": 1.0, "lam1": 4.0},
    "exp-mean": {},
}


@dataclass(frozen=True)
class GeneratorSpec:
    """Synthetic family, feature dimension, family parameters and noise law.

    Features are uniform on ``[low, high]^d`` (defaults 0 and 1) except for
    ``exp-mean`` (independent normals with means ``0, 2, 4, ...`` and
    variances ``2, 3, 4, ...``) and ``sum-normal`` (two features).
    """

    family: str
    d: int = 1
    params: dict = field(default_factory=dict)
    noise: str = "normal"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {', '.join(FAMILIES)}")
        if self.noise not in NOISES:
            raise ValueError(f"unknown noise family {self.noise!r}; choose from {', '.join(NOISES)}")
        if self.d < 1:
            raise ValueError("dimension must be positive")
        if self.family == "sum-normal" and self.d != 2:
            raise ValueError("sum-normal has exactly two features")
        unknown = set(self.params) - set(_DEFAULTS[self.family]) - {"low", "high"}
        if unknown:
            raise ValueError(f"unknown parameters for {self.family}: {sorted(unknown)}")
        p = self.par
        if p["high"] <= p["low"]:
            raise ValueError("feature range must have high > low")
        if self.family in ("type1", "type3") and (p["slope"] < 0 or p["sigma0"] + p["slope"] * p["low"] <= 0):
            raise ValueError("spread must stay positive on the feature range")
        if self.family == "type2" and p["cv"] <= 0:
            raise ValueError("coefficient of variation must be positive")
        if self.family == "triangular" and (p["lam0"] <= 0 or p["lam1"] < 0 or p["low"] < 0):
            raise ValueError("triangular width must stay positive")

    @property
    def par(self) -> dict:
        base = {"low": 0.0, "high": 1.0}
        base.update(_DEFAULTS[self.family])
        base.update({k: float(v) for k, v in self.params.items()})
        return base

    def mu(self, X) -> np.ndarray:
        return _moments(self, np.atleast_2d(np.asarray(X, dtype=float)))[0]

    def sigma(self, X) -> np.ndarray:
        return _moments(self, np.atleast_2d(np.asarray(X, dtype=float)))[1]

    def oracle(self) -> OracleModel:
        return OracleModel(self.mu, self.sigma)


@dataclass(frozen=True)
class SyntheticSample:
    data: Dataset
    mu: np.ndarray
    sigma: np.ndarray

    def oracle_outputs(self) -> RegressionOutputs:
        return RegressionOutputs(point=self.mu, spread=self.sigma)


def _moments(spec: GeneratorSpec, X: np.ndarray):
    p = spec.par
    m = X.mean(axis=1)
    f = spec.family
    if f == "type1":
        mu = np.full(X.shape[0], p["mean"])
        sigma = p["sigma0"] + p["slope"] * m
    elif f == "type2":
        mu, sigma = m, p["cv"] * np.abs(m)
    elif f == "type3":
        mu, sigma = m, p["sigma0"] + p["slope"] * X[:, 0]
    elif f == "type4":
        # mean/spread of the unshifted normal; the mode offset is not modelled
        mu, sigma = m, p["cv"] * np.abs(m)
    elif f == "naval-like":
        mu = np.sin(np.pi * X).sum(axis=1) + 0.5 * m ** 2
        sigma = np.full(X.shape[0], p["noise"])
    elif f == "sum-normal":
        mu, sigma = X[:, 0] + X[:, 1], np.sqrt(1.0 + np.abs(X[:, 1] - 0.5))
    elif f == "triangular":
        lam = p["lam0"] + p["lam1"] * X[:, 0]
        mu, sigma = 2.0 * lam / 3.0, lam / (3.0 * math.sqrt(2.0))
    else:  # exp-mean
        mu = np.abs(m)
        sigma = mu.copy()
    return mu, sigma


def standard_noise(family: str, size, gen: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-variance draws from one of :data:`NOISES`."""
    if family == "normal":
        return gen.standard_normal(size)
    if family == "laplace":
        return gen.laplace(0.0, 1.0 / math.sqrt(2.0), size)
    if family == "uniform":
        return gen.uniform(-math.sqrt(3.0), math.sqrt(3.0), size)
    if family == "exponential":
        return gen.exponential(1.0, size) - 1.0
    if family == "triangular":
        return 3.0 * math.sqrt(2.0) * (np.sqrt(gen.random(size)) - 2.0 / 3.0)
    raise ValueError(f"unknown noise family {family!r}")


def _features(spec: GeneratorSpec, n: int, gen) -> np.ndarray:
    if spec.family == "exp-mean":
        means = 2.0 * np.arange(spec.d)
        var = 2.0 + np.arange(spec.d)
        return means + np.sqrt(var) * gen.standard_normal((n, spec.d))
    p = spec.par
    return gen.uniform(p["low"], p["high"], (n, spec.d))


def generate(spec: GeneratorSpec, n: int, rng=None) -> SyntheticSample:
    """Draw ``n`` i.i.d. rows from the family's joint law."""
    if n < 1:
        raise ValueError("need at least one row")
    gen = as_generator(rng)
    X = _features(spec, n, gen)
    mu, sigma = _moments(spec, X)
    p = spec.par
    if spec.family == "type4":
        centre = np.where(mu <= p["split"], mu - p["offset"], mu + p["offset"])
        y = centre + sigma * gen.standard_normal(n)
    elif spec.family == "triangular":
        lam = p["lam0"] + p["lam1"] * X[:, 0]
        y = lam * np.sqrt(gen.random(n))
    elif spec.family == "exp-mean":
        y = gen.exponential(1.0, n) * mu
    else:
        y = mu + sigma * standard_noise(spec.noise, n, gen)
    return SyntheticSample(Dataset(X, y, "regression"), mu, sigma)


# ---------------------------------------------------------------------------
# misspecification

MISSPEC_MODES = ("sigma-shift", "sigma-scale", "mu-shift-const", "mu-shift-prop", "explicit-quadratic")
SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class MisspecSpec:
    mode: str
    lam: float = 0.0

    def __post_init__(self):
        if self.mode not in MISSPEC_MODES:
            raise ValueError(f"unknown misspecification {self.mode!r}; choose from {', '.join(MISSPEC_MODES)}")
        if not math.isfinite(self.lam):
            raise ValueError("misspecification parameter must be finite")


def misspecify(outputs: RegressionOutputs, spec: MisspecSpec, rng=None) -> RegressionOutputs:
    """Perturb oracle mean/spread estimates.

    ``sigma-shift`` adds ``N(0, lam^2)`` to the spread, ``sigma-scale``
    multiplies it by ``lam``, ``mu-shift-const`` adds ``N(0, lam^2)`` to the
    mean and ``mu-shift-prop`` adds ``N(0, lam^2 sigma^2)``. ``explicit-quadratic``
    maps the variance to ``5 (sigma^2 - 0.5)^2 + 0.5``. Spreads are clipped
    at ``1e-6``.
    """
    outputs._need("point", "spread")
    mu = np.asarray(outputs.point, dtype=float)
    sigma = np.asarray(outputs.spread, dtype=float)
    gen = as_generator(rng)
    lam = spec.lam
    if spec.mode == "sigma-shift":
        sigma = sigma + lam * gen.standard_normal(sigma.shape)
    elif spec.mode == "sigma-scale":
        sigma = lam * sigma
    elif spec.mode == "mu-shift-const":
        mu = mu + lam * gen.standard_normal(mu.shape)
    elif spec.mode == "mu-shift-prop":
        mu = mu + lam * sigma * gen.standard_normal(mu.shape)
    else:
        sigma = np.sqrt(5.0 * (sigma ** 2 - 0.5) ** 2 + 0.5)
    return RegressionOutputs(point=mu, spread=np.maximum(sigma, SIGMA_FLOOR))


# ---------------------------------------------------------------------------
# diagnostics


def cdf_curves(per_class_scores: dict, marginal: str | None = "all") -> list[tuple]:
    """Step-corner points ``(group, score, cdf)`` of each empirical CDF.

    Each jump contributes the point before and after the jump. The marginal
    curve over all classes is appended under the name ``marginal`` unless
    that is ``None``. Empty classes are skipped with a warning.
    """
    rows = []
    pooled = []
    for group, scores in per_class_scores.items():
        s = np.sort(np.asarray(scores, dtype=float).ravel())
        if s.size == 0:
            warnings.warn(f"class {group} has no scores; skipped", stacklevel=2)
            continue
        pooled.append(s)
        rows += _corners(group, s)
    if marginal is not None and pooled:
        rows += _corners(marginal, np.sort(np.concatenate(pooled)))
    return rows


def _corners(group, s: np.ndarray) -> list[tuple]:
    vals, counts = np.unique(s, return_counts=True)
    after = np.cumsum(counts) / s.size
    before = np.concatenate([[0.0], after[:-1]])
    out = []
    for v, b, a in zip(vals, before, after):
        out.append((group, float(v), float(b)))
        out.append((group, float(v), float(a)))
    return out


@lru_cache(maxsize=256)
def _hd_weights_cached(n: int, q: float) -> np.ndarray:
    a, b = (n + 1) * q, (n + 1) * (1 - q)
    cdf = np.array([reg_inc_beta(i / n, a, b) for i in range(n + 1)])
    w = np.diff(cdf)
    w.setflags(write=False)
    return w


def hd_weights(n: int, q: float) -> np.ndarray:
    """Harrell-Davis weights of the ``n`` order statistics at level ``q``."""
    if n < 1:
        raise ValueError("empty sample")
    if not 0 < q < 1:
        raise ValueError(f"Harrell-Davis level must lie in (0, 1), got {q}")
    return _hd_weights_cached(int(n), float(q))


def hd_quantile(values, q: float) -> float:
    s = np.sort(np.asarray(values, dtype=float).ravel())
    if s.size == 0:
        raise ValueError("empty sample")
    return float(hd_weights(s.size, q) @ s)


def _inflated(n: int, alpha: float) -> float:
    # inflated level, kept inside (0, 1) as the estimator requires
    return min((1.0 - alpha) * (1.0 + 1.0 / n), 1.0 - 1e-9)


def bootstrap_quantile_test(scores_1, scores_2, alpha: float, B: int = 1000, beta: float = 0.05,
                            rng=None) -> tuple[float, float, bool]:
    """Bootstrap interval for the difference of inflated Harrell-Davis
    quantiles of two score samples.

    Each replicate resamples both classes with replacement at their original
    sizes. Returns ``(ci_lo, ci_hi, excludes_zero)``.
    """
    if B < 100:
        raise ValueError("need at least 100 bootstrap replicates")
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    s1 = np.asarray(scores_1, dtype=float).ravel()
    s2 = np.asarray(scores_2, dtype=float).ravel()
    if s1.size == 0 or s2.size == 0:
        raise ValueError("empty sample")
    gen = as_generator(rng)
    diffs = np.empty(B)
    w1 = hd_weights(s1.size, _inflated(s1.size, alpha))
    w2 = hd_weights(s2.size, _inflated(s2.size, alpha))
    chunk = max(1, 2_000_000 // max(s1.size, s2.size))
    for start in range(0, B, chunk):
        m = min(chunk, B - start)
        r1 = np.sort(s1[gen.integers(0, s1.size, (m, s1.size))], axis=1)
        r2 = np.sort(s2[gen.integers(0, s2.size, (m, s2.size))], axis=1)
        diffs[start:start + m] = r1 @ w1 - r2 @ w2
    diffs.sort()
    lo_idx = min(max(math.ceil(B * beta / 2 - 1e-9), 1), B)
    hi_idx = min(max(math.ceil(B - B * beta / 2 - 1e-9), 1), B)
    lo, hi = float(diffs[lo_idx - 1]), float(diffs[hi_idx - 1])
    return lo, hi, bool(lo > 0 or hi < 0)


def beta_coverage_band(n_cal: int, alpha: float, band_level: float = 0.1) -> tuple[float, float]:
    """Central ``1 - band_level`` interval of the coverage law
    ``Beta(k, n + 1 - k)`` with ``k = ceil((1 - alpha)(n + 1))``.

    When ``k > n`` the law degenerates at one.
    """
    if n_cal < 1:
        raise ValueError("calibration size must be positive")
    k = order_rank(n_cal + 1, 1.0 - alpha) if alpha < 1 else 0
    if k > n_cal:
        return 1.0, 1.0
    if k == 0:
        return 0.0, 0.0
    a, b = k, n_cal + 1 - k
    return beta_quantile(band_level / 2, a, b), beta_quantile(1 - band_level / 2, a, b)


def ks_band_99(m: int, n: int) -> float:
    """Asymptotic 99% critical value of the two-sample KS statistic."""
    return 1.63 * math.sqrt((m + n) / (m * n))


def pivotality_check(scores, bins) -> dict:
    """Two-sample KS statistic of every bin against the pooled scores.

    Returns ``{bin: (statistic, critical_value, passes)}``.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    bins = np.asarray(bins).ravel()
    if scores.size != bins.size:
        raise DataError("one bin label per score is required")
    out = {}
    for b in np.unique(bins):
        sel = scores[bins == b]
        stat = ks_distance(sel, scores)
        crit = ks_band_99(sel.size, scores.size)
        out[int(b)] = (stat, crit, bool(stat < crit))
    return out
