"""Command-line experiment runner.

Subcommands ``calibrate``, ``predict``, ``evaluate``, ``experiment`` and
``monitor`` read a flat ``key = value`` config (dotted keys) and write CSV.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import inspect
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import Calibration, ConformalBand, PredictionSet, band_interval, band_normalized, band_point
from .cluster import ClusterMap, Hierarchy, composite_cluster, size_threshold_cluster
from .conditional import BinRule, equal_frequency_bins
from .core import ConfigError, Dataset, DataError, NumericError, SeededRng, read_csv, split
from .martingale import MartingaleState, monitor
from .metrics import evaluate
from .models import (bagged_knn_fit, knn_class_probs, knn_fit, knn_interval_outputs, knn_meanvar,
                     knn_point, knn_refitter, normal_interval, ridge_fit, ridge_predict, ridge_refitter)
from .recipes import RECIPES, run_recipe
from .resample import (ccp_fit, ccp_grid_set, cv_plus_band, jackknife_plus_band, leave_one_out_folds,
                       make_folds, oob_conformal_band, residual_refitter, tcp_predict_set)
from .scores import (RapsConfig, RegressionOutputs, aps_score, interval_score, normalized_score,
                     raps_score, residual_score, softmax_score)
from .synthlab import GeneratorSpec, generate

__all__ = ["Config", "load_config", "main"]

STRATEGIES = ("marginal", "mondrian", "cluster-score", "cluster-hierarchy", "ccp", "jackknife+", "cv+",
              "oob", "tcp")
RESAMPLING = ("ccp", "jackknife+", "cv+", "oob", "tcp")
REGRESSION_SCORES = ("residual", "normalized", "interval")
CLASSIFICATION_SCORES = ("softmax", "aps", "raps")
MODELS = ("knn", "ridge", "oracle")
TAXONOMIES = ("none", "label", "feature", "difficulty")

KNOWN_KEYS = {
    "seed", "alpha", "out", "replications", "score", "strategy", "strict_mode",
    "data.path", "data.train", "data.calibration", "data.test", "data.generator", "data.d", "data.n",
    "data.noise", "data.kind", "data.k",
    "split.calibration", "split.folds",
    "model.kind", "model.k", "model.penalty", "model.laplace", "model.bags",
    "raps.lam", "raps.k_reg", "raps.randomized", "raps.rank",
    "taxonomy", "taxonomy.bins", "taxonomy.column", "taxonomy.edges",
    "cluster.m", "cluster.size_threshold", "cluster.min_obs", "cluster.levels", "cluster.hierarchy",
    "ccp.grid_size", "ccp.inclusive",
    "monitor.betting", "monitor.epsilon", "monitor.threshold", "monitor.calibration", "monitor.online",
}
OPEN_PREFIXES = ("data.param.", "experiment.")

_MISSING = object()


# ---------------------------------------------------------------------------
# configuration


@dataclass
class Config:
    """Flat dotted-key configuration with typed, key-naming accessors."""

    values: dict
    base: Path = Path(".")

    def has(self, key: str) -> bool:
        return key in self.values

    def _raw(self, key, default):
        if key in self.values:
            return self.values[key]
        if default is _MISSING:
            raise ConfigError(f"missing config key {key!r}")
        return default

    def str(self, key, default=_MISSING):
        v = self._raw(key, default)
        return v if v is None else str(v)

    def choice(self, key, options, default=_MISSING) -> str:
        v = self.str(key, default)
        if v not in options:
            raise ConfigError(f"{key} = {v!r} is not one of {', '.join(options)}")
        return v

    def float(self, key, default=_MISSING, lo=-math.inf, hi=math.inf) -> float:
        v = self._raw(key, default)
        try:
            f = float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} = {v!r} is not a number") from None
        if not (lo <= f <= hi) or math.isnan(f):
            raise ConfigError(f"{key} = {v!r} must lie in [{lo}, {hi}]")
        return f

    def int(self, key, default=_MISSING, lo=-math.inf) -> int:
        v = self._raw(key, default)
        try:
            i = int(str(v))
        except ValueError:
            raise ConfigError(f"{key} = {v!r} is not an integer") from None
        if i < lo:
            raise ConfigError(f"{key} = {v!r} must be at least {lo}")
        return i

    def bool(self, key, default=_MISSING) -> bool:
        v = str(self._raw(key, default)).lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key} = {v!r} is not a boolean")

    def floats(self, key, default=_MISSING) -> list[float]:
        v = self._raw(key, default)
        if isinstance(v, (list, tuple)):
            return [float(x) for x in v]
        try:
            return [float(x) for x in str(v).replace(";", ",").split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{key} = {v!r} is not a comma-separated list of numbers") from None

    def path(self, key, default=_MISSING, must_exist=True) -> Path | None:
        v = self._raw(key, default)
        if v is None:
            return None
        p = Path(v)
        if not p.is_absolute():
            p = self.base / p
        if must_exist and not p.exists():
            raise ConfigError(f"{key}: file not found: {p}")
        return p

    def prefixed(self, prefix: str) -> dict:
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}


def parse_config(text: str, base=Path(".")) -> Config:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KNOWN_KEYS and not key.startswith(OPEN_PREFIXES):
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        values[key] = value
    return Config(values, Path(base))


def load_config(path) -> Config:
    if path is None:
        return Config({})
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), p.parent)


# ---------------------------------------------------------------------------
# data and models


@dataclass
class Problem:
    train: Dataset
    calibration: Dataset
    kind: str
    k: int
    spec: GeneratorSpec | None
    train_index: np.ndarray
    calibration_index: np.ndarray


def _generator_spec(cfg: Config) -> GeneratorSpec | None:
    if not cfg.has("data.generator"):
        return None
    params = {}
    for k, v in cfg.prefixed("data.param.").items():
        params[k] = cfg.float(f"data.param.{k}")
    try:
        return GeneratorSpec(cfg.str("data.generator"), cfg.int("data.d", 1, lo=1), params,
                             cfg.str("data.noise", "normal"))
    except ValueError as exc:
        raise ConfigError(f"data.generator: {exc}") from None


def _data_kind(cfg: Config):
    return cfg.choice("data.kind", ("regression", "classification"), None) if cfg.has("data.kind") else None


def load_problem(cfg: Config, rng: SeededRng, resampling: bool = False) -> Problem:
    spec = _generator_spec(cfg)
    kind = _data_kind(cfg)
    if cfg.has("data.train") and cfg.has("data.calibration"):
        train = read_csv(cfg.path("data.train"), kind)
        cal = read_csv(cfg.path("data.calibration"), train.kind)
        if cal.dim != train.dim:
            raise DataError(f"calibration file has {cal.dim} features, training file has {train.dim}")
        tr_idx, ca_idx = np.arange(len(train)), np.arange(len(cal))
    else:
        if spec is not None:
            data = generate(spec, cfg.int("data.n", lo=1), rng.child("data")).data
        elif cfg.has("data.path"):
            data = read_csv(cfg.path("data.path"), kind)
        else:
            raise ConfigError("no data source: set data.path, data.train + data.calibration or data.generator")
        if resampling:
            idx = np.arange(len(data))
            return Problem(data, data.take(idx[:0]), data.kind, _n_classes(cfg, data), spec, idx, idx[:0])
        frac = cfg.float("split.calibration", 0.5, 0.0, 1.0)
        s = split(data, (1.0 - frac, frac, 0.0), rng.child("split"))
        train, cal, tr_idx, ca_idx = s.train, s.calibration, s.train_index, s.calibration_index
    if resampling:
        data = Dataset(np.vstack([train.features, cal.features]),
                       np.concatenate([train.responses, cal.responses]), train.kind)
        idx = np.arange(len(data))
        return Problem(data, data.take(idx[:0]), data.kind, _n_classes(cfg, data), spec, idx, idx[:0])
    return Problem(train, cal, train.kind, _n_classes(cfg, train, cal), spec, tr_idx, ca_idx)


def _n_classes(cfg: Config, *parts: Dataset) -> int:
    if parts[0].kind != "classification":
        return 0
    seen = max((p.n_classes for p in parts if len(p)), default=0)
    k = cfg.int("data.k", seen, lo=1)
    if k < seen:
        raise DataError(f"data.k = {k} but labels go up to {seen}")
    return k


class Predictor:
    """A fitted model exposing regression outputs or class probabilities."""

    def __init__(self, cfg: Config, problem: Problem):
        self.cfg = cfg
        self.problem = problem
        self.kind = cfg.choice("model.kind", MODELS, "knn")
        self.alpha = cfg.float("alpha", 0.1, 0.0, 1.0)
        train = problem.train
        if len(train) == 0:
            raise DataError("empty training set")
        if self.kind == "oracle":
            if problem.spec is None:
                raise ConfigError("model.kind = oracle needs data.generator")
            if problem.kind != "regression":
                raise ConfigError("model.kind = oracle only supports regression")
        elif self.kind == "knn":
            k = cfg.int("model.k", 5, lo=1)
            if k > len(train):
                raise ConfigError(f"model.k = {k} exceeds the {len(train)} training rows")
            self.model = knn_fit(train.features, train.responses, k)
        else:
            if problem.kind != "regression":
                raise ConfigError("model.kind = ridge only supports regression")
            self.model = ridge_fit(train.features, train.responses, cfg.float("model.penalty", 0.0, 0.0))

    def outputs(self, X, score: str) -> RegressionOutputs:
        X = np.asarray(X, dtype=float)
        if self.kind == "oracle":
            mu, sigma = self.problem.spec.mu(X), self.problem.spec.sigma(X)
            if score == "interval":
                return normal_interval(mu, sigma, self.alpha)
            return RegressionOutputs(point=mu, spread=sigma)
        if self.kind == "ridge":
            if score != "residual":
                raise ConfigError(f"score = {score} needs a spread estimate; ridge provides none")
            return RegressionOutputs(point=np.atleast_1d(ridge_predict(self.model, X)))
        if score == "residual":
            return RegressionOutputs(point=np.atleast_1d(knn_point(self.model, X)))
        if score == "normalized":
            if self.model.k < 2:
                raise ConfigError("score = normalized needs model.k >= 2")
            mu, sd = knn_meanvar(self.model, X)
            return RegressionOutputs(point=np.atleast_1d(mu), spread=np.atleast_1d(sd))
        return knn_interval_outputs(self.model, X, self.alpha)

    def probs(self, X) -> np.ndarray:
        return np.atleast_2d(knn_class_probs(self.model, np.asarray(X, dtype=float), self.problem.k,
                                             self.cfg.float("model.laplace", 1.0, 0.0)))


def _raps(cfg: Config) -> RapsConfig:
    return RapsConfig(cfg.float("raps.lam", 0.0, 0.0), cfg.int("raps.k_reg", 0, lo=0),
                      cfg.bool("raps.randomized", False),
                      cfg.choice("raps.rank", ("descending", "ascending"), "descending"))


def _label_scores(cfg: Config, score: str, probs, rng) -> np.ndarray:
    """(n, k) candidate-label score matrix."""
    if score == "softmax":
        return np.atleast_2d(softmax_score(probs))
    if score == "aps":
        return np.atleast_2d(aps_score(probs, rng=rng, randomized=cfg.bool("raps.randomized", False)))
    return np.atleast_2d(raps_score(probs, cfg=_raps(cfg), rng=rng))


# ---------------------------------------------------------------------------
# strata


class Strata:
    """Taxonomy classes and their grouping into calibration strata."""

    def __init__(self, cfg: Config, problem: Problem, strategy: str, cal_out=None):
        self.strategy = strategy
        self.kind = problem.kind
        if strategy == "marginal":
            self.taxonomy = "none"
        else:
            default = "label" if problem.kind == "classification" else "difficulty"
            self.taxonomy = cfg.choice("taxonomy", TAXONOMIES, default)
        if self.taxonomy == "label":
            if problem.kind != "classification":
                raise ConfigError("taxonomy = label needs classification data")
            self.k = problem.k
        elif self.taxonomy == "feature":
            col = cfg.int("taxonomy.column", 1, lo=1)
            if col > problem.train.dim:
                raise ConfigError(f"taxonomy.column = {col} but the data has {problem.train.dim} features")
            self.column = col - 1
            self.rule = BinRule(tuple(cfg.floats("taxonomy.edges")))
            self.k = self.rule.k
        elif self.taxonomy == "difficulty":
            if problem.kind != "regression":
                raise ConfigError("taxonomy = difficulty needs regression data")
            if cal_out is None or cal_out.spread is None:
                raise ConfigError("taxonomy = difficulty needs a spread estimate (score = normalized, "
                                  "or model.kind = oracle)")
            if cfg.has("taxonomy.edges"):
                self.rule = BinRule(tuple(cfg.floats("taxonomy.edges")))
            else:
                bins = cfg.int("taxonomy.bins", 3, lo=1)
                self.rule = equal_frequency_bins(np.atleast_1d(cal_out.spread), bins)
            self.k = self.rule.k
        else:
            self.k = 1
        self.cmap = None

    def classes(self, X, outputs=None, labels=None) -> np.ndarray:
        n = np.asarray(X).shape[0]
        if self.taxonomy == "none":
            return np.ones(n, dtype=int)
        if self.taxonomy == "label":
            return np.asarray(labels, dtype=int)
        if self.taxonomy == "feature":
            return np.atleast_1d(self.rule.assign(np.asarray(X)[:, self.column]))
        return np.atleast_1d(self.rule.assign(np.atleast_1d(outputs.spread)))

    def build_clusters(self, cfg: Config, classes, scores, rng: SeededRng) -> None:
        counts = {c: int(np.sum(classes == c)) for c in range(1, self.k + 1)}
        if self.strategy == "cluster-score":
            per = {c: scores[classes == c] for c in range(1, self.k + 1)}
            levels = cfg.floats("cluster.levels", "0.5,0.6,0.7,0.8,0.9")
            self.cmap = composite_cluster(counts, per, levels, cfg.int("cluster.size_threshold", 100, lo=1),
                                          cfg.int("cluster.min_obs", 10, lo=0), cfg.int("cluster.m", 2, lo=1),
                                          rng.child("kmeans"))
        elif self.strategy == "cluster-hierarchy":
            hier = Hierarchy.read(cfg.path("cluster.hierarchy"))
            if sorted(hier.classes) != list(range(1, self.k + 1)):
                raise DataError(f"hierarchy leaves {hier.classes} do not match classes 1..{self.k}")
            self.cmap = size_threshold_cluster(hier, counts, cfg.float("cluster.size_threshold", 100, 0.0))
        else:
            self.cmap = ClusterMap.from_groups([[c] for c in range(1, self.k + 1)])

    def strata(self, classes) -> np.ndarray:
        return self.cmap.clusters(np.asarray(classes, dtype=int))


# ---------------------------------------------------------------------------
# commands


def _strategy(cfg: Config) -> str:
    return cfg.choice("strategy", STRATEGIES, "marginal")


def _score_kind(cfg: Config, kind: str) -> str:
    if kind == "regression":
        return cfg.choice("score", REGRESSION_SCORES, "residual")
    return cfg.choice("score", CLASSIFICATION_SCORES, "softmax")


def _regression_scores(score, out, y):
    fn = {"residual": residual_score, "normalized": normalized_score, "interval": interval_score}[score]
    return np.atleast_1d(fn(out, y))


def _writer(path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def _num(v) -> str:
    return repr(float(v))


@dataclass
class Fitted:
    cfg: Config
    problem: Problem
    predictor: Predictor
    strata: Strata
    score: str
    cal_classes: np.ndarray
    cal_strata: np.ndarray
    cal_scores: np.ndarray
    a_stars: dict


def fit_pipeline(cfg: Config, rng: SeededRng) -> Fitted:
    strategy = _strategy(cfg)
    problem = load_problem(cfg, rng)
    if len(problem.calibration) == 0:
        raise DataError("empty calibration set")
    score = _score_kind(cfg, problem.kind)
    alpha = cfg.float("alpha", 0.1, 0.0, 1.0)
    strict = cfg.bool("strict_mode", True)
    pred = Predictor(cfg, problem)
    cal = problem.calibration
    if problem.kind == "regression":
        out = pred.outputs(cal.features, score)
        scores = _regression_scores(score, out, cal.responses)
    else:
        out = None
        probs = pred.probs(cal.features)
        if np.any(cal.responses > problem.k):
            raise DataError(f"calibration labels exceed data.k = {problem.k}")
        scores = _label_scores(cfg, score, probs, rng.child("smoothing").child("calibration"))
        scores = scores[np.arange(len(cal)), cal.responses - 1]
    strata = Strata(cfg, problem, strategy, out)
    classes = strata.classes(cal.features, out, cal.responses)
    strata.build_clusters(cfg, classes, scores, rng)
    st = strata.strata(classes)
    a_stars = {}
    for s in range(1, strata.cmap.m + 1):
        sel = scores[st == s]
        a_stars[s] = (Calibration(sel, alpha, strict).a_star, sel.size) if sel.size else (math.inf, 0)
    return Fitted(cfg, problem, pred, strata, score, classes, st, scores, a_stars)


def cmd_calibrate(cfg: Config, rng: SeededRng, out_dir: Path) -> None:
    strategy = _strategy(cfg)
    if strategy in RESAMPLING:
        _calibrate_resampling(cfg, rng, out_dir, strategy)
        return
    fit = fit_pipeline(cfg, rng)
    alpha = cfg.float("alpha", 0.1, 0.0, 1.0)
    out_dir.mkdir(parents=True, exist_ok=True)
    fh, w = _writer(out_dir / "calibration.csv")
    with fh:
        w.writerow(["stratum", "members", "n", "alpha", "a_star"])
        for s in range(1, fit.strata.cmap.m + 1):
            a, n = fit.a_stars[s]
            members = ";".join(str(c) for c in sorted(fit.strata.cmap.members[s]))
            w.writerow([s, members, n, _num(alpha), _num(a)])
    fh, w = _writer(out_dir / "scores.csv")
    with fh:
        w.writerow(["row", "class", "stratum", "score"])
        for r, c, s, v in zip(fit.problem.calibration_index, fit.cal_classes, fit.cal_strata, fit.cal_scores):
            w.writerow([int(r), int(c), int(s), _num(v)])
    _write_meta(cfg, rng, out_dir, strategy)


def _calibrate_resampling(cfg, rng, out_dir, strategy):
    if strategy == "tcp":
        raise ConfigError("strategy = tcp has no separate calibration step; run predict")
    problem = load_problem(cfg, rng, resampling=True)
    data = problem.train
    if problem.kind != "regression":
        raise ConfigError(f"strategy = {strategy} supports regression data only")
    alpha = cfg.float("alpha", 0.1, 0.0, 1.0)
    X, y = data.features, data.responses
    if strategy == "oob":
        model = bagged_knn_fit(X, y, cfg.int("model.k", 5, lo=1), cfg.int("model.bags", 50, lo=1),
                               rng.child("bootstrap"))
        preds = model.oob_predictions()
        fold = np.where(np.isnan(preds), 0, 1)
    else:
        folds = _folds(cfg, rng, len(data), strategy)
        point = _point_refitter(cfg)
        preds = np.empty(len(data))
        for s in range(1, folds.f + 1):
            rows = folds.rows(s)
            keep = np.setdiff1d(np.arange(len(data)), rows)
            preds[rows] = point(X[keep], y[keep])(X[rows])
        fold = folds.fold_of
    scores = np.abs(y - preds)
    out_dir.mkdir(parents=True, exist_ok=True)
    fh, w = _writer(out_dir / "calibration.csv")
    with fh:
        w.writerow(["stratum", "members", "n", "alpha", "a_star"])
        for s in sorted(set(int(f) for f in fold if f > 0)):
            sel = scores[fold == s]
            w.writerow([s, s, sel.size, _num(alpha), _num(Calibration(sel, alpha, True).a_star)])
    fh, w = _writer(out_dir / "scores.csv")
    with fh:
        w.writerow(["row", "class", "stratum", "score"])
        for r in range(len(data)):
            w.writerow([r, 1, int(fold[r]), _num(scores[r]) if fold[r] > 0 else "nan"])
    _write_meta(cfg, rng, out_dir, strategy)


def _write_meta(cfg, rng, out_dir, strategy):
    fh, w = _writer(out_dir / "meta.csv")
    with fh:
        w.writerow(["key", "value"])
        w.writerow(["version", __version__])
        w.writerow(["seed", rng.seed])
        w.writerow(["strategy", strategy])
        for k in sorted(cfg.values):
            if k not in ("seed", "strategy"):
                w.writerow([k, cfg.values[k]])


def _point_refitter(cfg: Config):
    kind = cfg.choice("model.kind", ("knn", "ridge"), "knn")
    if kind == "knn":
        return knn_refitter(cfg.int("model.k", 5, lo=1))
    return ridge_refitter(cfg.float("model.penalty", 0.0, 0.0))


def _folds(cfg, rng, n, strategy):
    if strategy == "jackknife+":
        return leave_one_out_folds(n)
    f = cfg.int("split.folds", 5, lo=2)
    if f > n:
        raise ConfigError(f"split.folds = {f} exceeds the {n} rows")
    return make_folds(n, f, rng.child("split"))


def read_features(path: Path, d: int) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        cols = {h: i for i, h in enumerate(header)}
        names = [f"x{j}" for j in range(1, d + 1)]
        missing = [c for c in names if c not in cols]
        extra = [h for h in header if h.startswith("x") and h[1:].isdigit() and h not in names]
        if missing or extra:
            raise DataError(f"{path}: expected feature columns x1..x{d}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(row[cols[c]]) for c in names])
            except (ValueError, IndexError):
                raise DataError(f"{path}: line {lineno}: bad feature row") from None
    X = np.asarray(rows, dtype=float).reshape(len(rows), d)
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: features contain NaN or Inf")
    return X


def read_calibration(directory: Path) -> dict:
    path = directory / "calibration.csv"
    if not path.exists():
        raise ConfigError(f"calibration artifacts not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"stratum", "members", "n", "alpha", "a_star"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns {sorted(need)}")
        table = {}
        for row in reader:
            try:
                members = [int(m) for m in row["members"].split(";") if m]
                table[int(row["stratum"])] = (members, float(row["a_star"]))
            except ValueError:
                raise DataError(f"{path}: malformed row {row}") from None
    return table


def cmd_predict(cfg: Config, rng: SeededRng, out_dir: Path, test_path: Path | None,
                cal_dir: Path | None) -> None:
    strategy = _strategy(cfg)
    if test_path is None:
        test_path = cfg.path("data.test")
    elif not test_path.exists():
        raise ConfigError(f"test file not found: {test_path}")
    alpha = cfg.float("alpha", 0.1, 0.0, 1.0)
    if strategy in RESAMPLING:
        regions = _predict_resampling(cfg, rng, test_path, strategy, alpha)
    else:
        fit = fit_pipeline(cfg, rng)
        table = read_calibration(cal_dir or out_dir)
        cmap = ClusterMap.from_groups([table[s][0] for s in sorted(table)])
        if cmap.cluster_of != fit.strata.cmap.cluster_of:
            raise DataError("calibration artifacts do not match the configured strata")
        a_of = {s: table[s][1] for s in table}
        X = read_features(test_path, fit.problem.train.dim)
        regions = _predict_split(fit, X, a_of, alpha, rng)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_predictions(out_dir / "predictions.csv", regions)


def _predict_split(fit: Fitted, X, a_of, alpha, rng):
    if fit.problem.kind == "regression":
        out = fit.predictor.outputs(X, fit.score)
        st = fit.strata.strata(fit.strata.classes(X, out))
        n = X.shape[0]
        lo, hi, deg = np.empty(n), np.empty(n), np.zeros(n, dtype=bool)
        for s in np.unique(st):
            sel = st == s
            a = a_of[int(s)]
            if fit.score == "residual":
                b = band_point(np.atleast_1d(out.point)[sel], a)
            elif fit.score == "normalized":
                b = band_normalized(np.atleast_1d(out.point)[sel], np.atleast_1d(out.spread)[sel], a)
            else:
                b = band_interval(np.atleast_1d(out.lower)[sel], np.atleast_1d(out.upper)[sel], a)
            lo[sel], hi[sel] = b.lo, b.hi
            deg[sel] = np.broadcast_to(np.asarray(b.degenerate, dtype=bool), (int(sel.sum()),))
        return ConformalBand(lo, hi, alpha, deg)
    k = fit.problem.k
    probs = fit.predictor.probs(X)
    scores = _label_scores(fit.cfg, fit.score, probs, rng.child("smoothing").child("test"))
    n = X.shape[0]
    mask = np.zeros((n, k), dtype=bool)
    for c in range(1, k + 1):
        st = fit.strata.strata(fit.strata.classes(X, None, np.full(n, c)))
        a = np.array([a_of[int(s)] for s in st])
        mask[:, c - 1] = scores[:, c - 1] <= a
    return [PredictionSet(frozenset(int(c) + 1 for c in np.flatnonzero(row)), alpha) for row in mask]


def _predict_resampling(cfg, rng, test_path, strategy, alpha):
    problem = load_problem(cfg, rng, resampling=True)
    data = problem.train
    X, y = data.features, data.responses
    Q = read_features(test_path, data.dim)
    strict = cfg.bool("strict_mode", False)
    if strategy == "tcp":
        if problem.kind != "classification":
            raise ConfigError("strategy = tcp needs classification data (a finite label space)")
        k_nn, laplace, k = cfg.int("model.k", 5, lo=1), cfg.float("model.laplace", 1.0, 0.0), problem.k

        def refit(Xf, yf):
            model = knn_fit(Xf, yf, min(k_nn, len(yf)))
            return lambda Xq, yq: softmax_score(knn_class_probs(model, Xq, k, laplace), np.asarray(yq, dtype=int))

        gen = rng.child("smoothing")
        return [tcp_predict_set(X, y, q, range(1, k + 1), refit, alpha, smoothed=True, rng=gen) for q in Q]
    if problem.kind != "regression":
        raise ConfigError(f"strategy = {strategy} supports regression data only")
    if strategy == "oob":
        model = bagged_knn_fit(X, y, cfg.int("model.k", 5, lo=1), cfg.int("model.bags", 50, lo=1),
                               rng.child("bootstrap"))
        return oob_conformal_band(model, y, Q, alpha)
    folds = _folds(cfg, rng, len(data), strategy)
    point = _point_refitter(cfg)
    if strategy == "jackknife+":
        return jackknife_plus_band(X, y, point, Q, alpha, strict)
    if strategy == "cv+":
        return cv_plus_band(X, y, folds, point, Q, alpha, strict)
    fit = ccp_fit(X, y, folds, residual_refitter(point))
    span = float(np.ptp(y)) or 1.0
    grid = np.linspace(y.min() - span, y.max() + span, cfg.int("ccp.grid_size", 401, lo=2))
    inclusive = cfg.bool("ccp.inclusive", False)
    lo, hi, deg = np.empty(len(Q)), np.empty(len(Q)), np.zeros(len(Q), dtype=bool)
    for i, q in enumerate(Q):
        keep = ccp_grid_set(fit, q, grid, alpha, inclusive)
        if keep.size:
            lo[i], hi[i] = keep.min(), keep.max()
        else:
            lo[i] = hi[i] = np.nan
            deg[i] = True
    return ConformalBand(lo, hi, alpha, deg)


def write_predictions(path: Path, regions) -> None:
    fh, w = _writer(path)
    with fh:
        if isinstance(regions, ConformalBand):
            w.writerow(["row", "lo", "hi"])
            lo, hi = np.atleast_1d(regions.lo), np.atleast_1d(regions.hi)
            deg = np.broadcast_to(np.asarray(regions.degenerate, dtype=bool), lo.shape)
            for i in range(lo.size):
                w.writerow([i, "", ""] if deg[i] else [i, _num(lo[i]), _num(hi[i])])
        else:
            w.writerow(["row", "labels"])
            for i, s in enumerate(regions):
                w.writerow([i, ";".join(str(c) for c in sorted(s.labels))])


def read_predictions(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        rows = list(reader)
    try:
        if {"lo", "hi"} <= set(fields):
            deg = np.array([r["lo"] == "" for r in rows], dtype=bool)
            lo = np.array([float(r["lo"]) if r["lo"] else 0.0 for r in rows])
            hi = np.array([float(r["hi"]) if r["hi"] else 0.0 for r in rows])
            return ConformalBand(lo, hi, None, deg)
        if "labels" in fields:
            return [PredictionSet(frozenset(int(c) for c in r["labels"].split(";") if c)) for r in rows]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    raise DataError(f"{path}: expected columns row,lo,hi or row,labels")


def _read_column(path: Path, names) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        name = next((n for n in names if n in fields), None)
        if name is None:
            raise DataError(f"{path}: no column named {' or '.join(names)}")
        try:
            return np.array([float(r[name]) for r in reader])
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}: {exc}") from None


def cmd_evaluate(cfg: Config, out_dir: Path, predictions: Path, truths: Path, classes: Path | None) -> None:
    for p in (predictions, truths, classes):
        if p is not None and not p.exists():
            raise ConfigError(f"file not found: {p}")
    regions = read_predictions(predictions)
    y = _read_column(truths, ("y", "label"))
    n = len(regions)
    if y.size != n:
        raise DataError(f"{n} predictions but {y.size} truths")
    cls = None
    if classes is not None:
        cls = _read_column(classes, ("class",)).astype(int)
        if cls.size != n:
            raise DataError(f"{n} predictions but {cls.size} class labels")
    alpha = cfg.float("alpha", 0.1, 0.0, 1.0) if cfg.has("alpha") else None
    report = evaluate(regions, y, cls, alpha)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "report.csv")


def cmd_experiment(cfg: Config, rng: SeededRng, out_dir: Path, name: str) -> None:
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe {name!r}; available recipes: {', '.join(RECIPES)}")
    sig = inspect.signature(RECIPES[name])
    params = {}
    for key, raw in cfg.prefixed("experiment.").items():
        if key not in sig.parameters or key in ("seed", "threads"):
            raise ConfigError(f"experiment.{key}: recipe {name} has no parameter {key!r}")
        default = sig.parameters[key].default
        if isinstance(default, bool):
            params[key] = cfg.bool(f"experiment.{key}")
        elif isinstance(default, int):
            params[key] = cfg.int(f"experiment.{key}")
        elif isinstance(default, float):
            params[key] = cfg.float(f"experiment.{key}")
        else:
            raise ConfigError(f"experiment.{key}: parameter cannot be set from a config")
    if cfg.has("replications"):
        if "reps" not in sig.parameters:
            raise ConfigError(f"replications: recipe {name} has no replication count")
        params["reps"] = cfg.int("replications", lo=1)
    if cfg.has("alpha") and "alpha" in sig.parameters:
        params["alpha"] = cfg.float("alpha", lo=0.0, hi=1.0)
    run_recipe(name, out_dir, seed=rng.seed, **params)


def cmd_monitor(cfg: Config, rng: SeededRng, out_dir: Path, stream: Path) -> None:
    if not stream.exists():
        raise ConfigError(f"stream file not found: {stream}")
    scores = _read_column(stream, ("score",))
    online = cfg.bool("monitor.online", False)
    cal = _read_column(cfg.path("monitor.calibration"), ("score",)) if cfg.has("monitor.calibration") else np.zeros(0)
    if cal.size == 0 and not online:
        raise ConfigError("monitor.calibration: no calibration scores (or set monitor.online = true)")
    if not (np.all(np.isfinite(scores)) and np.all(np.isfinite(cal))):
        raise DataError("scores contain NaN or Inf")
    try:
        state = MartingaleState(cfg.choice("monitor.betting", ("mixture", "power"), "mixture"),
                                cfg.float("monitor.epsilon", 0.5), cfg.float("monitor.threshold", 20.0))
    except ValueError as exc:
        raise ConfigError(f"monitor: {exc}") from None
    events, _ = monitor(scores, cal, state, rng.child("smoothing"), online=online)
    out_dir.mkdir(parents=True, exist_ok=True)
    fh, w = _writer(out_dir / "monitor.csv")
    with fh:
        w.writerow(["index", "p_value", "wealth", "alert"])
        for e in events:
            w.writerow([e.index, _num(e.p_value), _num(e.wealth), int(e.alert)])


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", "-o", help="output directory (overrides config key out)")
    parser = argparse.ArgumentParser(prog="conformal-kit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("calibrate", parents=[common], help="fit the model and calibrate critical scores")
    p = sub.add_parser("predict", parents=[common], help="prediction regions for a test file")
    p.add_argument("--test", help="CSV with feature columns x1..xd")
    p.add_argument("--calibration", help="directory holding calibration.csv (default: output directory)")
    p = sub.add_parser("evaluate", parents=[common], help="coverage and efficiency report")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truths", required=True, help="CSV with a y or label column")
    p.add_argument("--classes", help="CSV with a class column")
    p = sub.add_parser("experiment", parents=[common], help="run a named recipe")
    p.add_argument("recipe", help="one of: " + ", ".join(RECIPES))
    p = sub.add_parser("monitor", parents=[common], help="test martingale over a score stream")
    p.add_argument("--stream", required=True, help="CSV with a score column")
    return parser


def _run(args) -> None:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.int("seed", 0, lo=0)
    if seed >= 2**64:
        raise ConfigError("seed must be below 2**64")
    rng = SeededRng(seed)
    out_dir = Path(args.out) if args.out else cfg.path("out", "out", must_exist=False)
    if args.command == "calibrate":
        cmd_calibrate(cfg, rng, out_dir)
    elif args.command == "predict":
        cmd_predict(cfg, rng, out_dir, Path(args.test) if args.test else None,
                    Path(args.calibration) if args.calibration else None)
    elif args.command == "evaluate":
        cmd_evaluate(cfg, out_dir, Path(args.predictions), Path(args.truths),
                     Path(args.classes) if args.classes else None)
    elif args.command == "experiment":
        cmd_experiment(cfg, rng, out_dir, args.recipe)
    else:
        cmd_monitor(cfg, rng, out_dir, Path(args.stream))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
