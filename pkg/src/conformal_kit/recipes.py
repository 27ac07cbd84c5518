"""Seeded experiment recipes producing plot-ready tables.

Each recipe is a pure function of its parameters and seed. Monte Carlo
replicates draw from their own named substreams (``mc:<i>``-style children
of the recipe stream), so results do not depend on the thread count.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import norm

from .calibrate import Calibration, critical_rank, critical_score, smoothed_p_value
from .cluster import MixtureSpec, mixture_bound, quantile_matched_coverage, tv_distance_numeric
from .conditional import equal_frequency_bins
from .core import SeededRng, parallel_map
from .martingale import MartingaleState, mixture_log_wealth_path, monitor
from .models import knn_fit, knn_point, normal_interval, ridge_fit, ridge_predict
from .scores import interval_score, normalized_score, residual_score
from .synthlab import GeneratorSpec, MisspecSpec, beta_coverage_band, generate, misspecify

__all__ = [
    "Table",
    "RECIPES",
    "run_recipe",
    "beta_band",
    "illustration",
    "conditional_table",
    "table4_1",
    "table4_2",
    "misspec_sweep",
    "clusterwise_sweep",
    "martingale_demo",
    "VARIANCE_TABLE_SPEC",
]


@dataclass
class Table:
    """A named CSV table with column documentation."""

    name: str
    columns: list
    rows: list = field(default_factory=list)
    doc: str = ""
    column_doc: dict = field(default_factory=dict)

    def write(self, directory) -> Path:
        path = Path(directory) / f"{self.name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([_fmt(v) for v in row])
        return path

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


# ---------------------------------------------------------------------------
# coverage law of split conformal prediction


def beta_band(seed: int = 0, n_max: int = 500, reps: int = 100, n_test: int = 10_000,
              n_train: int = 500, alpha: float = 0.1, band_level: float = 0.1,
              threads: int | None = None) -> list[Table]:
    """Empirical coverage against the Beta coverage band, per calibration size.

    A ridge mean model is fit once on ``n_train`` rows of the exponential
    mean-scale data; for every calibration size ``n`` a test set of
    ``n_test`` rows is shared by ``reps`` independent calibration sets.
    """
    root = SeededRng(seed).child("beta_band")
    spec = GeneratorSpec("exp-mean", d=5)
    train = generate(spec, n_train, root.child("train")).data
    model = ridge_fit(train.features, train.responses, 0.0)

    def resid(sample):
        return np.abs(sample.data.responses - ridge_predict(model, sample.data.features))

    def one_size(n):
        stream = root.child(f"mc:{n}")
        test = np.sort(resid(generate(spec, n_test, stream.child("test"))))
        cal = resid(generate(spec, n * reps, stream.child("cal"))).reshape(reps, n)
        k = critical_rank(n, alpha)
        if k > n:
            cov = np.ones(reps)
        else:
            a_star = np.partition(cal, k - 1, axis=1)[:, k - 1]
            cov = np.searchsorted(test, a_star, side="right") / n_test
        lo, hi = beta_coverage_band(n, alpha, band_level)
        inside = (cov >= lo) & (cov <= hi)
        return n, float(cov.mean()), float(cov.std()), lo, hi, float(inside.mean())

    rows = parallel_map(one_size, range(1, n_max + 1), threads)
    per_size = Table(
        "beta_band", ["n_cal", "mean_coverage", "sd_coverage", "band_lo", "band_hi", "frac_inside"], rows,
        "Empirical coverage of split conformal regression versus the Beta coverage band.",
        {"n_cal": "calibration set size",
         "mean_coverage": f"mean test coverage over {reps} calibration sets",
         "sd_coverage": "standard deviation of that coverage",
         "band_lo": f"{band_level / 2:g} quantile of the Beta coverage law",
         "band_hi": f"{1 - band_level / 2:g} quantile of the Beta coverage law",
         "frac_inside": "fraction of calibration sets whose coverage lies in the band"})
    overall = float(np.mean([r[-1] for r in rows]))
    summary = Table("beta_band_summary", ["metric", "value"],
                    [["frac_inside", overall], ["alpha", alpha], ["n_test", n_test], ["reps", reps]],
                    "Overall fraction of coverages inside the band (all sizes pooled).",
                    {"metric": "quantity name", "value": "its value"})
    return [per_size, summary]


def illustration(seed: int = 0, n_sample: int = 20, n_draws: int = 100_000, alpha: float = 0.1,
                 threads: int | None = None) -> list[Table]:
    """Object-weight toy: critical score of a sample of uniform integer
    weights and the population coverage of the resulting set."""
    root = SeededRng(seed).child("illustration")
    weights = root.child("sample").gen.integers(1, 21, n_sample)
    a_star = critical_score(Calibration(weights.astype(float), alpha))
    draws = root.child("population").gen.integers(1, 21, n_draws)
    fixed = 17
    rows = [
        ["sample_critical_score", a_star],
        ["sample_set_exact_coverage", min(a_star, 20) / 20.0],
        ["sample_set_mc_coverage", float(np.mean(draws <= a_star))],
        ["fixed_set_upper", fixed],
        ["fixed_set_exact_coverage", fixed / 20.0],
        ["fixed_set_mc_coverage", float(np.mean(draws <= fixed))],
        ["n_draws", n_draws],
    ]
    return [Table("illustration", ["quantity", "value"], rows,
                  "Prediction set {1..a*} for uniform integer weights on 1..20.",
                  {"quantity": "name", "value": "value"})]


# ---------------------------------------------------------------------------
# conditional coverage across variance bins

# quadratic-mean data with mean variance near the fixed point 0.5 of the
# explicit variance misspecification
VARIANCE_TABLE_SPEC = GeneratorSpec("type2", d=15, params={"cv": 0.1, "high": 2.0 * math.sqrt(50.0)})

_BIN_NAMES = ("low", "medium", "high")


def _icp_bin_coverage(cal_scores, cal_var, test_scores, test_var, alpha, k_bins=3):
    """Marginal calibration; coverage per equal-frequency bin of the
    estimated variance (bins fit on calibration)."""
    a_star = critical_score(Calibration(cal_scores, alpha))
    rule = equal_frequency_bins(cal_var, k_bins)
    bins = rule.assign(test_var)
    hit = test_scores <= a_star
    return float(hit.mean()), [float(hit[bins == b].mean()) for b in range(1, rule.k + 1)]


def conditional_table(seed: int = 0, misspec: MisspecSpec | None = None, n_cal: int = 10_000,
                      n_tests: int = 20, n_test: int = 1000, alpha: float = 0.1,
                      spec: GeneratorSpec = VARIANCE_TABLE_SPEC, name: str = "table",
                      threads: int | None = None) -> list[Table]:
    """Per-variance-bin coverage of a marginal split conformal predictor with
    residual and spread-normalized scores, for the oracle model or a
    misspecified version of it."""
    root = SeededRng(seed).child(name)

    def outputs(sample, stream):
        out = sample.oracle_outputs()
        return misspecify(out, misspec, stream) if misspec is not None else out

    cal = generate(spec, n_cal, root.child("cal"))
    cal_out = outputs(cal, root.child("misspec-cal"))
    cal_var = np.asarray(cal_out.spread) ** 2
    scorers = {"residual": residual_score, "normalized": normalized_score}
    cal_scores = {k: f(cal_out, cal.data.responses) for k, f in scorers.items()}

    def one(i):
        stream = root.child(f"mc:{i}")
        test = generate(spec, n_test, stream.child("test"))
        out = outputs(test, stream.child("misspec"))
        var = np.asarray(out.spread) ** 2
        return {k: _icp_bin_coverage(cal_scores[k], cal_var, f(out, test.data.responses), var, alpha)
                for k, f in scorers.items()}

    results = parallel_map(one, range(n_tests), threads)
    grid, detail = [], []
    for k in scorers:
        marg = np.array([r[k][0] for r in results])
        per_bin = np.array([r[k][1] for r in results])
        means, sds = per_bin.mean(axis=0), per_bin.std(axis=0, ddof=1)
        grid.append([k, *(float(v) for v in means)])
        detail.append([k, "all", float(marg.mean()), float(marg.std(ddof=1))])
        detail += [[k, b, float(m), float(s)] for b, m, s in zip(_BIN_NAMES, means, sds)]
    what = "oracle model" if misspec is None else f"{misspec.mode} misspecified model"
    bin_doc = {"score": "nonconformity score (residual or spread-normalized)"}
    bin_doc.update({b: f"mean coverage in the {b} estimated-variance bin over {n_tests} test sets of {n_test}"
                    for b in _BIN_NAMES})
    return [
        Table(name, ["score", *_BIN_NAMES], grid,
              f"Coverage per estimated-variance bin, {what}, alpha={alpha}.", bin_doc),
        Table(f"{name}_detail", ["score", "bin", "mean_coverage", "sd_coverage"], detail,
              "Marginal and per-bin coverage with the spread over test sets.",
              {"score": "nonconformity score", "bin": "estimated-variance bin or all",
               "mean_coverage": "mean coverage over test sets",
               "sd_coverage": "standard deviation over test sets"}),
    ]


def table4_1(seed: int = 0, threads: int | None = None, **kw) -> list[Table]:
    return conditional_table(seed, None, name="table4_1", threads=threads, **kw)


def table4_2(seed: int = 0, threads: int | None = None, **kw) -> list[Table]:
    return conditional_table(seed, MisspecSpec("explicit-quadratic"), name="table4_2", threads=threads, **kw)


SWEEP_SPECS = {
    "type1": GeneratorSpec("type1", d=5, params={"mean": 0.0, "sigma0": 0.1, "slope": 1.0}),
    "type2": GeneratorSpec("type2", d=5, params={"cv": 0.1, "low": 1.0, "high": 10.0}),
    "type3": GeneratorSpec("type3", d=5, params={"sigma0": 0.1, "slope": 1.0}),
    "type4": GeneratorSpec("type4", d=5),
}

SWEEP_MISSPECS = (
    ("oracle", None),
    ("sigma-shift-0.01", MisspecSpec("sigma-shift", 0.01)),
    ("sigma-shift-0.1", MisspecSpec("sigma-shift", 0.1)),
    ("sigma-shift-1", MisspecSpec("sigma-shift", 1.0)),
    ("sigma-scale-5", MisspecSpec("sigma-scale", 5.0)),
    ("mu-shift-const-1", MisspecSpec("mu-shift-const", 1.0)),
    ("mu-shift-prop-1", MisspecSpec("mu-shift-prop", 1.0)),
)


def misspec_sweep(seed: int = 0, n_cal: int = 10_000, n_test: int = 10_000, alpha: float = 0.1,
                  threads: int | None = None) -> list[Table]:
    """Per-bin coverage for each data type, misspecification and score."""
    root = SeededRng(seed).child("misspec_sweep")
    jobs = [(t, label, ms) for t in SWEEP_SPECS for label, ms in SWEEP_MISSPECS]

    def one(job):
        t, label, ms = job
        stream = root.child(t).child(label)
        spec = SWEEP_SPECS[t]
        cal, test = generate(spec, n_cal, stream.child("cal")), generate(spec, n_test, stream.child("test"))
        outs = []
        for sample, key in ((cal, "mcal"), (test, "mtest")):
            out = sample.oracle_outputs()
            out = misspecify(out, ms, stream.child(key)) if ms is not None else out
            outs.append(normal_interval(out.point, out.spread, alpha))
        rows = []
        for score, fn in (("residual", residual_score), ("interval", interval_score),
                          ("normalized", normalized_score)):
            marg, per_bin = _icp_bin_coverage(
                fn(outs[0], cal.data.responses), np.asarray(outs[0].spread) ** 2,
                fn(outs[1], test.data.responses), np.asarray(outs[1].spread) ** 2, alpha)
            rows.append([t, label, score, "all", marg])
            rows += [[t, label, score, _BIN_NAMES[b], v] for b, v in enumerate(per_bin)]
        return rows

    rows = [r for chunk in parallel_map(one, jobs, threads) for r in chunk]
    return [Table("misspec_sweep", ["data_type", "misspec", "score", "bin", "coverage"], rows,
                  "Conditional coverage per estimated-variance bin under misspecified mean/spread estimates.",
                  {"data_type": "synthetic family", "misspec": "perturbation of the oracle estimates",
                   "score": "nonconformity score", "bin": "estimated-variance bin (or all)",
                   "coverage": f"empirical coverage on {n_test} test rows"})]


# ---------------------------------------------------------------------------
# clusterwise calibration


def _folded_pdf(mu, sigma):
    return lambda a: np.where(np.asarray(a) >= 0,
                              norm.pdf(a, mu, sigma) + norm.pdf(a, -mu, sigma), 0.0)


def _folded_cdf(mu, sigma):
    return lambda a: np.where(np.asarray(a) >= 0,
                              norm.cdf(a, mu, sigma) - norm.cdf(-np.asarray(a), mu, sigma), 0.0)


def _sweep_params(sweep: str, x: float):
    if sweep == "mean":
        return [(0.0, 1.0), (x, 1.0), (2.0 * x, 1.0)]
    return [(0.0, 1.0), (0.0, 0.1 * x), (0.0, 0.25 * x)]


def _tv_bound(params, c, alpha):
    hi = max(abs(m) + 12 * s for m, s in params)
    grid = np.linspace(0.0, hi, 4001)
    worst = 0.0
    for j, (m, s) in enumerate(params):
        if j == c:
            continue
        tv, _ = tv_distance_numeric(_folded_pdf(*params[c]), _folded_pdf(m, s), grid)
        worst = max(worst, tv)
    return 1.0 - alpha - worst


def clusterwise_point(sweep: str, x: float, stream: SeededRng, n_cal: int = 100, reps: int = 10_000,
                      alpha: float = 0.1) -> list[list]:
    """Class coverages of one pooled (clusterwise) calibration at one
    parameter value, with the quantile-matching limit and both bounds."""
    params = _sweep_params(sweep, x)
    k = len(params)
    weights = np.full(k, 1.0 / k)
    gen = stream.gen
    labels = gen.integers(0, k, (reps, n_cal))
    mus = np.array([m for m, _ in params])
    sds = np.array([s for _, s in params])
    cal = np.abs(mus[labels] + sds[labels] * gen.standard_normal((reps, n_cal)))
    r = critical_rank(n_cal, alpha)
    a_star = np.partition(cal, r - 1, axis=1)[:, r - 1] if r <= n_cal else np.full(reps, np.inf)
    test = np.abs(mus[None, :] + sds[None, :] * gen.standard_normal((reps, k)))
    hits = test <= a_star[:, None]
    mix = MixtureSpec(tuple(weights), tuple(_folded_cdf(m, s) for m, s in params))
    rows = []
    for c in range(k):
        emp = float(hits[:, c].mean())
        se = math.sqrt(max(emp * (1 - emp), 1.0 / reps) / reps)
        rows.append([sweep, x, c + 1, emp, se, quantile_matched_coverage(mix, c + 1, alpha),
                     _tv_bound(params, c, alpha), mixture_bound(weights, c + 1, alpha)])
    return rows


MEAN_GRID = tuple(0.25 * i for i in range(17))
SCALE_GRID = tuple(float(x) for x in range(1, 21))


def clusterwise_sweep(seed: int = 0, sweeps=("mean", "scale"), n_cal: int = 100, reps: int = 10_000,
                      alpha: float = 0.1, threads: int | None = None) -> list[Table]:
    """Clusterwise calibration of three folded-normal score classes with
    equal weights, sweeping a mean or a scale parameter."""
    root = SeededRng(seed).child("clusterwise_sweep")
    jobs = [(s, x) for s in sweeps for x in (MEAN_GRID if s == "mean" else SCALE_GRID)]
    chunks = parallel_map(lambda j: clusterwise_point(j[0], j[1], root.child(f"{j[0]}:{j[1]!r}"),
                                                      n_cal, reps, alpha), jobs, threads)
    rows = [r for chunk in chunks for r in chunk]
    return [Table("clusterwise_sweep",
                  ["sweep", "param", "class", "empirical", "stderr", "quantile_matched", "tv_bound",
                   "mixture_bound"], rows,
                  "Class coverage under one pooled calibration of three score classes "
                  "(mean sweep: |N(0,1)|, |N(x,1)|, |N(2x,1)|; scale sweep: |N(0,1)|, |N(0,0.1x)|, |N(0,0.25x)|).",
                  {"sweep": "mean or scale", "param": "sweep parameter x", "class": "score class 1..3",
                   "empirical": f"Monte Carlo class coverage over {reps} calibration sets of {n_cal}",
                   "stderr": "binomial standard error of the empirical coverage",
                   "quantile_matched": "large-calibration limit from the mixture quantile",
                   "tv_bound": "1 - alpha - largest total variation distance to another class",
                   "mixture_bound": "bound from the mixture weights alone"})]


# ---------------------------------------------------------------------------
# change detection


def martingale_demo(seed: int = 0, n_train: int = 200, n_cal: int = 500, n_pre: int = 200,
                    n_post: int = 100, shift: float = 3.0, noise: float = 1.0, threshold: float = 100.0,
                    threads: int | None = None) -> list[Table]:
    """Mixture test martingale on 1-NN residual scores of a stream whose
    response shifts by ``shift`` noise standard deviations mid-stream."""
    root = SeededRng(seed).child("martingale_demo")
    events = change_stream_events(root, n_train, n_cal, n_pre, n_post, shift, noise, threshold)
    rows = [[e.index, e.p_value, e.wealth, e.alert] for e in events]
    return [Table("martingale_demo", ["index", "p_value", "wealth", "alert"], rows,
                  f"Mixture martingale over a stream with a {shift:g} sd shift after {n_pre} points.",
                  {"index": "position in the stream (1-based)", "p_value": "smoothed conformal p-value",
                   "wealth": "mixture martingale wealth", "alert": f"1 once wealth reached {threshold:g}"})]


def change_stream_events(stream: SeededRng, n_train=200, n_cal=500, n_pre=200, n_post=100,
                         shift=3.0, noise=1.0, threshold=100.0):
    def draw(n, key, delta=0.0):
        g = stream.child(key).gen
        x = g.random((n, 1))
        return x, np.sin(2 * np.pi * x[:, 0]) + noise * g.standard_normal(n) + delta

    xt, yt = draw(n_train, "train")
    model = knn_fit(xt, yt, 1)
    xc, yc = draw(n_cal, "cal")
    xa, ya = draw(n_pre, "pre")
    xb, yb = draw(n_post, "post", shift * noise)
    xs, ys = np.vstack([xa, xb]), np.concatenate([ya, yb])
    cal = np.abs(yc - knn_point(model, xc))
    scores = np.abs(ys - knn_point(model, xs))
    events, _ = monitor(scores, cal, MartingaleState("mixture", threshold=threshold), stream.child("smoothing"))
    return events


RECIPES: dict[str, Callable[..., list[Table]]] = {
    "beta_band": beta_band,
    "illustration": illustration,
    "table4_1": table4_1,
    "table4_2": table4_2,
    "misspec_sweep": misspec_sweep,
    "clusterwise_sweep": clusterwise_sweep,
    "martingale_demo": martingale_demo,
}


def run_recipe(name: str, out_dir, seed: int = 0, threads: int | None = None, **params) -> list[Path]:
    """Run a recipe, write its tables and a README describing the columns."""
    if name not in RECIPES:
        raise KeyError(name)
    tables = RECIPES[name](seed=seed, threads=threads, **params)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [t.write(out) for t in tables]
    lines = [f"# Recipe `{name}`", "", f"Seed: {seed}", ""]
    for t in tables:
        lines += [f"## {t.name}.csv", "", t.doc, "", "| column | meaning |", "| --- | --- |"]
        lines += [f"| {c} | {t.column_doc.get(c, '')} |" for c in t.columns]
        lines.append("")
    readme = out / "README.md"
    readme.write_text("\n".join(lines), encoding="utf-8")
    return paths + [readme]
