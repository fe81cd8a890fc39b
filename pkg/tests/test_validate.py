import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesccp.validate import (
    HEADLINE_LEVEL,
    TABLE1_COLUMNS,
    TABLE1_WIDE_COLUMNS,
    TABLE2_COLUMNS,
    EvalCase,
    ValidationError,
    coverage,
    error_table,
    evaluate_holdout,
    linear_baseline,
    pit,
    relative_error,
)

from conftest import small_grid


@pytest.mark.parametrize("y, eta_hat, expected", [(100, 95, 0.05), (100, 100, 0.0), (100, 110, -0.10)])
def test_relative_error_cases(y, eta_hat, expected):
    assert relative_error(y, eta_hat) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("y", [0, -5])
def test_relative_error_nonpositive(y):
    with pytest.raises(ValidationError):
        relative_error(y, 1.0)


def test_error_table_symmetric():
    table = error_table({15: [0.1, -0.1]})
    total = table[table["age"] == "Total"].iloc[0]
    assert total["mean"] == pytest.approx(0.0, abs=1e-15)
    assert total["median"] == pytest.approx(0.0, abs=1e-15)
    assert total["rmse"] == pytest.approx(0.1, abs=1e-15)


def test_error_table_zeros_and_pooling():
    table = error_table({15: [0.0, 0.0], 20: [0.3]}, method="bayes")
    assert list(table.columns) == TABLE1_COLUMNS
    assert list(table["age"]) == [15, 20, "Total"]
    assert table.loc[0, ["mean", "median", "rmse"]].tolist() == [0.0, 0.0, 0.0]
    assert table.loc[2, "rmse"] == pytest.approx(np.sqrt(0.09 / 3))


def test_error_table_empty_group():
    with pytest.raises(ValidationError):
        error_table({15: []})
    with pytest.raises(ValidationError):
        error_table({})


def _case(y, lower, upper, age=15, level=HEADLINE_LEVEL):
    return EvalCase("g", age, y, (lower + upper) / 2, lower, upper, level)


def test_coverage_all_inside():
    cases = [_case(y, 0.0, 10.0) for y in (1.0, 5.0, 10.0)]
    row = coverage(cases).iloc[0]
    assert (row["in"], row["above"], row["below"]) == (1.0, 0.0, 0.0)


def test_coverage_thirds():
    cases = [_case(y, 10.0, 20.0) for y in (5.0, 15.0, 25.0)]
    row = coverage(cases).iloc[0]
    assert row["in"] == pytest.approx(1 / 3)
    assert row["above"] == pytest.approx(1 / 3)
    assert row["below"] == pytest.approx(1 / 3)


def test_coverage_boundaries():
    # upper limit counts as inside, lower limit as below
    row = coverage([_case(20.0, 10.0, 20.0), _case(10.0, 10.0, 20.0)]).iloc[0]
    assert (row["in"], row["above"], row["below"]) == (0.5, 0.0, 0.5)


def test_coverage_level_mismatch():
    with pytest.raises(ValidationError):
        coverage([_case(5.0, 0.0, 10.0, level=0.95)], level=0.90)


def test_eval_case_checks():
    with pytest.raises(ValidationError):
        EvalCase("g", 15, 0.0, 1.0, 0.5, 2.0, 0.9)
    with pytest.raises(ValidationError):
        EvalCase("g", 15, 1.0, 3.0, 0.5, 2.0, 0.9)
    with pytest.raises(ValidationError):
        EvalCase.from_samples("g", 15, 1.0, [])


_interval = st.tuples(st.floats(1, 100), st.floats(0, 50), st.floats(0.1, 50), st.sampled_from([15, 20, 25]))


@settings(max_examples=100, deadline=None)
@given(st.lists(_interval, min_size=1, max_size=30), st.randoms(use_true_random=False))
def test_coverage_properties(specs, rnd):
    cases = [_case(y, lo, lo + width, age) for y, lo, width, age in specs]
    table = coverage(cases)
    sums = table[["in", "above", "below"]].sum(axis=1)
    assert np.all(np.abs(sums - 1) <= 1e-12)
    assert np.all(table[["in", "above", "below"]].to_numpy() >= -1e-15)
    shuffled = list(cases)
    rnd.shuffle(shuffled)
    pd.testing.assert_frame_equal(coverage(shuffled), table)


def test_pit_cases():
    s = np.arange(1, 11)
    assert pit(s, 5) == 0.5
    assert pit(s, 0) == 0.0
    assert pit(s, 11) == 1.0
    with pytest.raises(ValidationError):
        pit([], 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200, unique=True))
def test_pit_at_median(samples):
    s = np.asarray(samples)
    assert abs(pit(s, np.median(s)) - 0.5) <= 1 / s.size


def test_pit_uniform_under_correct_model(rng):
    from scipy.stats import kstest

    values = [pit(rng.normal(size=400), rng.normal()) for _ in range(500)]
    assert kstest(values, "uniform").pvalue > 0.01


@pytest.mark.parametrize("p1, p2, expected", [(100, 150, 225), (80, 80, 80), (200, 100, 50)])
def test_linear_baseline_cases(p1, p2, expected):
    assert linear_baseline(p1, p2) == pytest.approx(expected, abs=1e-12)


def test_linear_baseline_rejects_nonpositive():
    with pytest.raises(ValidationError):
        linear_baseline(0, 10)
    with pytest.raises(ValidationError):
        linear_baseline([10, 20], [5, -1])


def _census(grid, years, value):
    rows = [(y, "district", d, age, value(i, a, d))
            for i, y in enumerate(years) for a, age in enumerate(grid.age_groups)
            for d in grid.districts]
    return pd.DataFrame(rows, columns=["year", "region_level", "region_id", "age_start", "count"])


def _holdout(grid, year, counts):
    rows = [(year, "county", c, age, counts[a, k]) for a, age in enumerate(grid.age_groups)
            for k, c in enumerate(grid.counties)]
    return pd.DataFrame(rows, columns=["year", "region_level", "region_id", "age_start", "count"])


@pytest.fixture
def setting():
    grid = small_grid(n_age=2, n_time=4)
    population = _census(grid, [1979, 1984], lambda i, a, d: 100.0 * (1 + 0.5 * i))
    truth = np.array([[60.0, 90.0, 200.0], [70.0, 80.0, 210.0]])
    holdout = _holdout(grid, 1989, truth)
    return grid, population, holdout, truth


def test_evaluate_holdout_exact_bayes(setting, rng):
    grid, population, holdout, truth = setting
    samples = truth[None] * np.exp(rng.normal(0, 0.01, (2001, 2, 3)))
    report = evaluate_holdout(samples, holdout, population, grid, 1989)
    assert set(report.errors["method"]) == {"interpolation", "bayes"}
    assert list(report.table1.columns) == TABLE1_COLUMNS
    assert list(report.table1_wide.columns) == TABLE1_WIDE_COLUMNS
    assert list(report.table1_wide["age"]) == [15, 20, "Total"]
    assert report.table1_wide["rmse_bayes"].iloc[-1] == report.rmse("bayes")
    assert list(report.table2.columns) == TABLE2_COLUMNS
    assert report.rmse("bayes") < 0.01
    # district baseline: 100 -> 150 gives 225; X holds counties a+b
    expected = [(150 - 225) / 150, (200 - 225) / 200, (150 - 225) / 150, (210 - 225) / 210]
    assert report.rmse("interpolation") == pytest.approx(np.sqrt(np.mean(np.square(expected))))
    assert len(report.pit) == 6
    assert set(report.coverage) == {0.90, 0.95}
    for table in report.coverage.values():
        sums = table[["in", "above", "below"]].sum(axis=1)
        assert np.all(np.abs(sums - 1) <= 1e-12)


def test_evaluate_holdout_writes_tables(setting, rng, tmp_path):
    grid, population, holdout, truth = setting
    samples = truth[None] * np.exp(rng.normal(0, 0.05, (500, 2, 3)))
    paths = evaluate_holdout(samples, holdout, population, grid, 1989).write(tmp_path)
    assert {p.name for p in paths.values()} == {"table1.csv", "table1_wide.csv", "table2.csv",
                                                "table2_95.csv", "pit.csv"}
    t1 = pd.read_csv(paths["table1"])
    assert list(t1.columns) == TABLE1_COLUMNS
    assert list(t1["age"].astype(str)) == ["15", "15", "20", "20", "Total", "Total"]
    wide = pd.read_csv(paths["table1_wide"])
    assert list(wide.columns) == TABLE1_WIDE_COLUMNS
    assert list(wide["age"].astype(str)) == ["15", "20", "Total"]


def test_evaluate_holdout_errors(setting):
    grid, population, holdout, truth = setting
    samples = np.ones((10, 2, 3))
    with pytest.raises(ValidationError, match="empty"):
        evaluate_holdout(samples, holdout.iloc[:0], population, grid, 1989)
    with pytest.raises(ValidationError, match="beyond"):
        evaluate_holdout(samples, holdout, population, grid, 1984)
    with pytest.raises(ValidationError, match="shape"):
        evaluate_holdout(np.ones((10, 3, 3)), holdout, population, grid, 1989)
    with pytest.raises(ValidationError, match="no rows"):
        evaluate_holdout(samples, holdout, population, grid, 1994)
    one_census = population[population["year"] == 1984]
    with pytest.raises(ValidationError, match="two earlier"):
        evaluate_holdout(samples, holdout, one_census, grid, 1989)
