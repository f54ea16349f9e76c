import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from refcast.evaluation import (
    MEASURES,
    QUANTILE_LEVELS,
    RESULT_COLUMNS,
    GofScores,
    GridSpec,
    PitSample,
    cvm_statistic,
    format_ranking,
    ks_statistic,
    mean_quantile_deviation_pp,
    predictor_influence,
    quantile_deviation,
    rank_results,
    read_results,
    results_frame,
    run_backtest,
    run_grid,
    write_results,
)
from refcast.forecast import pit_evaluate
from refcast.panel import Panel
from refcast.predictors import PredictorId, build_tables
from refcast.refclass import ClassParams, SkipCase, build_class
from refcast.synth import SynthSpec, generate_panel

from conftest import make_panel
from oracles import cvm_integral, ks_grid_sup, quantile_deviation_direct

# -- statistics ------------------------------------------------------------------


def test_ks_examples():
    assert ks_statistic([0.5]) == 0.5
    p = [0.1, 0.5, 0.9]
    assert ks_statistic(p) == pytest.approx(math.sqrt(3) * 7 / 30, abs=1e-12)
    assert ks_statistic(p) == pytest.approx(ks_grid_sup(p), abs=1e-12)
    assert ks_statistic(p) == pytest.approx(0.4041451884327381, abs=1e-12)
    for m in (1, 4, 25, 400):
        mids = (2 * np.arange(1, m + 1) - 1) / (2 * m)
        assert ks_statistic(mids) == pytest.approx(math.sqrt(m) / (2 * m), abs=1e-12)
        assert ks_grid_sup(mids) == pytest.approx(math.sqrt(m) / (2 * m), abs=1e-12)


def test_cvm_examples():
    assert cvm_statistic([0.5]) == pytest.approx(1 / 12)
    assert cvm_statistic([0.25, 0.75]) == pytest.approx(1 / 24)
    assert cvm_integral([0.5]) == pytest.approx(1 / 12, abs=1e-14)
    assert cvm_integral([0.25, 0.75]) == pytest.approx(1 / 24, abs=1e-14)


def test_statistics_reject_empty():
    for fn in (ks_statistic, cvm_statistic, quantile_deviation):
        with pytest.raises(ValueError):
            fn([])
    with pytest.raises(ValueError):
        quantile_deviation([0.5])
    with pytest.raises(ValueError):
        PitSample(None, [0.2, 1.5])


def test_quantile_deviation_examples():
    assert quantile_deviation(np.linspace(0, 1, 101)) == pytest.approx(0.0, abs=1e-12)
    assert quantile_deviation(np.full(10, 0.5)) == pytest.approx(3.18, abs=1e-12)
    assert mean_quantile_deviation_pp(0.0155) == pytest.approx(0.1722, abs=1e-4)
    assert round(mean_quantile_deviation_pp(0.0155), 2) == 0.17


pit_samples = st.lists(st.floats(0, 1), min_size=2, max_size=300)


@settings(max_examples=150, deadline=None)
@given(pit_samples)
def test_closed_forms_match_definitions(p):
    assert ks_statistic(p) == pytest.approx(ks_grid_sup(p), abs=1e-9)
    assert cvm_statistic(p) == pytest.approx(cvm_integral(p), abs=1e-9)
    assert quantile_deviation(p) == pytest.approx(quantile_deviation_direct(p, QUANTILE_LEVELS), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(pit_samples)
def test_statistic_bounds(p):
    m = len(p)
    assert 0 <= ks_statistic(p) / math.sqrt(m) <= 1 + 1e-12
    assert cvm_statistic(p) >= 1 / (12 * m) - 1e-12
    upper = sum(max(lam, 1 - lam) for lam in QUANTILE_LEVELS)
    assert 0 <= quantile_deviation(p) <= upper + 1e-12


def test_closed_forms_match_scipy():
    rng = np.random.default_rng(2)
    for m in (3, 50, 2000):
        p = rng.beta(2, 3, m)
        assert ks_statistic(p) == pytest.approx(math.sqrt(m) * stats.kstest(p, "uniform").statistic, abs=1e-12)
        assert cvm_statistic(p) == pytest.approx(stats.cramervonmises(p, "uniform").statistic, abs=1e-9)


def test_gof_scores_small_sample_is_nan():
    scores = GofScores.from_sample(PitSample(None, [0.3]))
    assert math.isnan(scores.delta_quantiles) and math.isnan(scores.ks)


# -- backtests -------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_synth():
    return generate_panel(SynthSpec(n_firms=80, n_years=18, seed=3, death_rate=0.03))


def scalar_backtest(tables, params, exclude_self=False):
    """Case-by-case PIT values via build_class, in (year, firm) order."""
    panel = tables.panel
    y = tables.outcomes.values(params.horizon)
    out = []
    frame = panel.frame.assign(row_pos=np.arange(len(panel)))
    for row in frame.sort_values(["fiscal_year", "firm_id"]).itertuples():
        if np.isnan(y[row.row_pos]):
            continue
        try:
            cls = build_class(tables, row.firm_id, row.fiscal_year, params, exclude_self)
        except SkipCase:
            continue
        out.append(pit_evaluate(cls.distribution, y[row.row_pos]))
    return np.asarray(out)


@pytest.mark.parametrize("params", [
    ClassParams("operating_margin", 1, 5, 0.2, "similarity", 5),
    ClassParams("sales_cagr_2", 3, 4, 0.1, "similarity", 5),
    ClassParams("sales", 1, 5, None, "mauboussin", 5),
    ClassParams("major_group", 2, 3, None, "major_group", 5),
    ClassParams("industry_group", 1, 5, None, "industry_group", 20),
])
def test_backtest_matches_case_by_case(small_synth, params):
    sample = run_backtest(small_synth.panel, small_synth.tables, params)
    expected = scalar_backtest(small_synth.tables, params)
    assert sample.m > 0
    np.testing.assert_array_equal(sample.values, expected)


def test_backtest_exclude_self_matches_case_by_case(small_synth):
    params = ClassParams("operating_margin", 1, 5, 0.2, "similarity", 5)
    sample = run_backtest(small_synth.panel, small_synth.tables, params, exclude_self=True)
    np.testing.assert_array_equal(sample.values, scalar_backtest(small_synth.tables, params, True))
    assert not np.array_equal(sample.values, run_backtest(small_synth.panel, small_synth.tables, params).values)


def test_backtest_skip_accounting(small_synth):
    panel, tables = small_synth.panel, small_synth.tables
    params = ClassParams("operating_margin", 1, 5, 0.2, "similarity", 5)
    sample = run_backtest(panel, tables, params)
    assert sample.m + sum(sample.skipped.values()) == len(panel)
    assert sample.skipped["window"] == int((panel.years < panel.start_year + 5).sum())


def test_admissible_case_years():
    recs = [(f"F{f}", y, 100.0 + f + y % 7, 1.0) for f in range(25) for y in range(1950, 2020)]
    panel = make_panel(recs)
    tables = build_tables(panel)
    sample = run_backtest(panel, tables, ClassParams("sales", 1, 5, 1.0, "similarity", 20))
    years = panel.years[sample.case_rows]
    assert (years.min(), years.max()) == (1955, 2018)


def test_tiny_panel_class_too_small():
    recs = [(f"F{f}", y, 100.0 + f, 1.0) for f in range(5) for y in range(2000, 2010)]
    panel = make_panel(recs)
    sample = run_backtest(panel, build_tables(panel), ClassParams("sales", 1, 3, 0.01))
    assert sample.m == 0
    assert max(sample.skipped, key=sample.skipped.get) == "class_too_small"


def test_independent_outcomes_give_uniform_pit():
    spec = SynthSpec(n_firms=600, n_years=30, seed=21, margin_drift=0.0,
                     knots_y=(0.0,) * 6, sigma_base=10.0)
    synth = generate_panel(spec)
    for predictor in ("operating_margin", "beta", "sales"):
        params = ClassParams(predictor, 1, 5, 0.05, "similarity")
        sample = run_backtest(synth.panel, synth.tables, params)
        assert sample.m > 10_000
        assert quantile_deviation(sample) < 0.05
        assert ks_statistic(sample) < 2.0


def test_backtest_thread_and_order_invariance(small_synth):
    panel, tables = small_synth.panel, small_synth.tables
    params = ClassParams("operating_margin", 1, 5, 0.2, "similarity", 5)
    base = run_backtest(panel, tables, params, threads=1)
    threaded = run_backtest(panel, tables, params, threads=4)
    np.testing.assert_array_equal(base.values, threaded.values)
    shuffled = panel.frame.sample(frac=1.0, random_state=5).reset_index(drop=True)
    other = Panel(shuffled, panel.start_year, panel.end_year)
    again = run_backtest(other, build_tables(other), params)
    np.testing.assert_array_equal(np.sort(base.values), np.sort(again.values))
    assert base.skipped == again.skipped


def test_audit_reports_no_violations(small_synth):
    for params in (ClassParams("operating_margin", 3, 5, 0.2, "similarity", 5),
                   ClassParams("sales", 1, 5, None, "mauboussin", 5),
                   ClassParams("major_group", 2, 5, None, "major_group", 5)):
        sample = run_backtest(small_synth.panel, small_synth.tables, params, audit=True)
        assert sample.audit["violations"] == 0
        assert sample.audit["classes"] == sample.m


# -- grid ------------------------------------------------------------------------

def test_default_grid_count():
    combos = GridSpec().combinations()
    assert len(combos) == 4 * 336
    for h in (1, 3, 5, 10):
        per_h = [p for p in combos if p.horizon == h]
        assert len(per_h) == 336
        assert sum(p.method == "similarity" for p in per_h) == 27 * 4 * 3
        assert sum(p.method == "mauboussin" for p in per_h) == 4
        assert sum(p.method in ("major_group", "industry_group") for p in per_h) == 8


def test_restricted_grid_and_dedupe(small_synth):
    grid = GridSpec(predictors=(PredictorId("beta"),),
                    windows=(5,), sizes=(0.1,), horizons=(1,), mauboussin=False, groups=False)
    results = run_grid(small_synth.panel, small_synth.tables, grid, threads=1)
    assert len(results) == 1
    p = ClassParams("beta", 1, 5, 0.1)
    with pytest.warns(UserWarning, match="duplicate"):
        results = run_grid(small_synth.panel, small_synth.tables, [p, p], threads=1)
    assert len(results) == 1


def test_grid_from_toml(tmp_path):
    path = tmp_path / "grid.toml"
    path.write_text('predictors = ["sales", "sales_cagr_3"]\nwindows = [5]\nsizes = [0.05]\nhorizons = [1, 3]\n'
                    'mauboussin = false\ngroups = true\n')
    grid = GridSpec.from_toml(path)
    assert len(grid.combinations()) == 2 * (2 + 2)
    path.write_text('predictors = "all"\n')
    assert len(GridSpec.from_toml(path).combinations()) == 4 * 336
    path.write_text('window = [5]\n')
    with pytest.raises(ValueError, match="unknown"):
        GridSpec.from_toml(path)


def test_grid_parallel_identical(small_synth):
    grid = GridSpec(predictors=(PredictorId("beta"), PredictorId("sales")),
                    windows=(3, 5), sizes=(0.1,), horizons=(1,), min_class=5)
    one = results_frame(run_grid(small_synth.panel, small_synth.tables, grid, threads=1))
    many = results_frame(run_grid(small_synth.panel, small_synth.tables, grid, threads=3))
    pd.testing.assert_frame_equal(one, many)


# -- ranking ---------------------------------------------------------------------

def fake_results(rows):
    base = {"window": 5, "size": 0.05, "method": "similarity", "horizon": 1, "m": 100,
            "skipped_small": 0, "skipped_window": 0, "skipped_missing": 0}
    frame = pd.DataFrame([{**base, **r} for r in rows])
    for m in MEASURES:
        frame[f"{m}_rank"] = 0
    return frame[RESULT_COLUMNS]


def test_rank_examples():
    frame = fake_results([
        {"predictor": "sales", "delta_q": 0.3, "ks": 1.0, "cvm": 0.3},
        {"predictor": "beta", "delta_q": 0.1, "ks": 3.0, "cvm": 0.1},
        {"predictor": "pe_ratio", "delta_q": 0.2, "ks": 2.0, "cvm": 0.2},
    ])
    ranked = rank_results(frame, "delta_q")
    assert ranked["predictor"].tolist() == ["beta", "pe_ratio", "sales"]
    assert ranked["delta_q_rank"].tolist() == [1, 2, 3]
    assert ranked["ks_rank"].tolist() == [3, 2, 1]
    assert "mean_abs_q_dev_pp" in ranked.columns
    by_ks = rank_results(frame, "ks")
    assert by_ks["predictor"].tolist() == ["sales", "pe_ratio", "beta"]
    single = rank_results(frame.iloc[:1], "cvm")
    assert single[["delta_q_rank", "ks_rank", "cvm_rank"]].iloc[0].tolist() == [1, 1, 1]


def test_ranks_are_permutations_and_nan_last():
    rng = np.random.default_rng(0)
    rows = [{"predictor": f"sales_cagr_{k}", "delta_q": rng.choice([0.1, 0.2, np.nan]),
             "ks": rng.choice([1.0, 2.0]), "cvm": 0.5, "horizon": 1 + k % 2} for k in range(1, 11)]
    ranked = rank_results(fake_results(rows))
    for h, grp in ranked.groupby("horizon"):
        for m in MEASURES:
            assert sorted(grp[f"{m}_rank"]) == list(range(1, len(grp) + 1))
        nan_ranks = grp.loc[grp["delta_q"].isna(), "delta_q_rank"]
        assert all(nan_ranks > grp.loc[grp["delta_q"].notna(), "delta_q_rank"].max())


def test_rank_errors():
    with pytest.raises(ValueError):
        rank_results(fake_results([{"predictor": "sales", "delta_q": 0.1, "ks": 1, "cvm": 1}]), "bogus")


def test_results_round_trip_and_format(tmp_path, small_synth):
    results = run_grid(small_synth.panel, small_synth.tables,
                       [ClassParams("beta", 1, 5, 0.1), ClassParams("sales", 1, 5, None, "mauboussin", 5)],
                       threads=1)
    frame = results_frame(results)
    assert list(frame.columns) == RESULT_COLUMNS
    write_results(frame, tmp_path / "r.csv")
    back = read_results(tmp_path / "r.csv")
    pd.testing.assert_frame_equal(back, frame, check_dtype=False, rtol=1e-11)
    write_results(frame, tmp_path / "r.json", "json")
    assert pd.read_json(tmp_path / "r.json").shape == frame.shape
    text = format_ranking(rank_results(frame), top=5)
    assert "horizon 1" in text and "(Mauboussin)" in text and "beta" in text


# -- predictor influence ---------------------------------------------------------

def test_influence_constant_outcome():
    rng = np.random.default_rng(1)
    recs = [(f"F{f}", y, 100.0, float(rng.normal(5, 10))) for f in range(60) for y in range(2000, 2012)]
    panel = make_panel(recs)
    params = ClassParams("operating_margin", 1, 5, 0.1, "similarity", 20)
    table = predictor_influence(panel, build_tables(panel), params, 2011)
    assert list(table.columns) == ["level", "predictor_value", "n", "median", "mean", "std"]
    assert table["level"].tolist() == pytest.approx([0.1 * k for k in range(1, 10)])
    assert (table["std"] == 0).all() and (table["mean"] == 0).all() and (table["median"] == 0).all()


def test_influence_outcome_equals_predictor():
    # next-year growth equals this year's margin, so the outcome is the predictor
    rng = np.random.default_rng(2)
    recs = []
    for f in range(80):
        sales = 100.0
        for y in range(2000, 2012):
            margin = float(rng.uniform(-20, 40))
            recs.append((f"F{f}", y, sales, margin * sales / 100))
            sales *= 1 + margin / 100
    panel = make_panel(recs)
    params = ClassParams("operating_margin", 1, 5, 0.05, "similarity", 20)
    table = predictor_influence(panel, build_tables(panel), params, 2011)
    assert np.all(np.diff(table["median"]) > 0)


def test_influence_v_shaped_std():
    spec = SynthSpec(n_firms=1500, n_years=25, seed=4, margin_drift=0.0, sigma_base=4.0, sigma_slope=1.5,
                     sigma_center=5.0)
    synth = generate_panel(spec)
    params = ClassParams("operating_margin", 1, 20, 0.05, "similarity")
    table = predictor_influence(synth.panel, synth.tables, params, synth.panel.end_year).set_index("level")
    std = table["std"].to_numpy()
    middle = int(np.argmin(std))
    assert 2 <= middle <= 6
    assert np.all(np.diff(std[:middle + 1]) < 0) and np.all(np.diff(std[middle:]) > 0)


def test_influence_errors(small_synth):
    with pytest.raises(ValueError):
        predictor_influence(small_synth.panel, small_synth.tables,
                            ClassParams("sales", 1, 5, None, "mauboussin"), 1960)
    with pytest.raises(ValueError):
        predictor_influence(small_synth.panel, small_synth.tables,
                            ClassParams("sales", 1, 5, 0.01), small_synth.panel.end_year)
