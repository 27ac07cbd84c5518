import csv
import math

import pytest

from conformal_kit.core import SeededRng
from conformal_kit.recipes import (
    RECIPES,
    beta_band,
    change_stream_events,
    clusterwise_point,
    illustration,
    martingale_demo,
    misspec_sweep,
    run_recipe,
    table4_1,
    table4_2,
)


def test_illustration():
    (t,) = illustration(seed=0, n_draws=20_000)
    values = dict(t.rows)
    assert values["fixed_set_upper"] == 17
    assert values["fixed_set_exact_coverage"] == pytest.approx(0.85)
    assert abs(values["fixed_set_mc_coverage"] - 0.85) < 4 * math.sqrt(0.85 * 0.15 / 20_000)


def test_beta_band_small():
    main, summary = beta_band(seed=1, n_max=30, reps=20, n_test=500, n_train=50)
    assert len(main.rows) == 30
    assert main.columns[:2] == ["n_cal", "mean_coverage"]
    for row in main.rows:
        rec = dict(zip(main.columns, row))
        assert 0 <= rec["band_lo"] <= rec["band_hi"] <= 1
        assert 0 <= rec["frac_inside"] <= 1
    assert summary.rows


def test_conditional_tables_small():
    for fn in (table4_1, table4_2):
        grid, detail = fn(seed=2, n_cal=600, n_tests=3, n_test=300)
        assert grid.columns == ["score", "low", "medium", "high"]
        assert [r[0] for r in grid.rows] == ["residual", "normalized"]
        assert all(0 <= v <= 1 for r in grid.rows for v in r[1:])
        assert [r[1] for r in detail.rows] == ["all", "low", "medium", "high"] * 2


def test_misspec_sweep_small():
    (t,) = misspec_sweep(seed=3, n_cal=300, n_test=300)
    assert t.columns == ["data_type", "misspec", "score", "bin", "coverage"]
    assert {r[1] for r in t.rows} >= {"oracle", "sigma-scale-5"}


def test_clusterwise_point_identical_classes():
    # scale 10 * 0.1 = 1 and 4 * 0.25 = 1: classes 1 and 2 coincide at x = 10
    rows = clusterwise_point("scale", 10.0, SeededRng(4), n_cal=100, reps=2000)
    assert len(rows) == 3
    for _, _, c, emp, se, qm, tv, mb in rows:
        assert emp >= mb - 3 * se
        assert 0 <= qm <= 1
    mean0 = clusterwise_point("mean", 0.0, SeededRng(5), n_cal=100, reps=4000)
    for _, _, c, emp, se, qm, tv, mb in mean0:
        assert qm == pytest.approx(0.9, abs=1e-6)
        assert tv == pytest.approx(0.9, abs=1e-6)
        assert abs(emp - (1 - 0.1 + 0.1 / 101)) <= 4 * se


def test_change_stream_detects_shift():
    events = change_stream_events(SeededRng(6), n_pre=150, n_post=60, threshold=100.0)
    first = next((e.index for e in events if e.alert), None)
    assert first is not None and 150 < first <= 200
    (t,) = martingale_demo(seed=6, n_pre=50, n_post=20)
    assert t.columns == ["index", "p_value", "wealth", "alert"] and len(t.rows) == 70


def test_run_recipe_writes_csv_and_readme(tmp_path):
    paths = run_recipe("illustration", tmp_path, seed=7, n_draws=1000)
    names = sorted(p.name for p in paths)
    assert names == ["README.md", "illustration.csv"]
    with open(tmp_path / "illustration.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["quantity", "value"]
    readme = (tmp_path / "README.md").read_text()
    assert "| column | meaning |" in readme
    with pytest.raises(KeyError):
        run_recipe("nope", tmp_path)
    assert set(RECIPES) == {"beta_band", "illustration", "table4_1", "table4_2", "misspec_sweep",
                            "clusterwise_sweep", "martingale_demo"}
