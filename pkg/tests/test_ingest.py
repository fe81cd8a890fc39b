import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesccp.ingest import (
    BoundaryProportions,
    InputConfig,
    InputError,
    aggregate_microdata,
    boundary_proportions,
    build_observations,
    load_inputs,
    read_wpp_mortality,
    read_wpp_pop,
    sampling_variance,
)
from bayesccp.synth import write_world
from conftest import small_grid


def _binomial_log_var(n, f, rng, reps=400_000):
    """Empirical variance of log(X / f), X ~ Binomial(n, f)."""
    x = rng.binomial(n, f, size=reps)
    return np.var(np.log(x[x > 0] / f))


@pytest.mark.parametrize("count, expected", [(1000, 0.009), (100, 0.09)])
def test_sampling_variance_values(count, expected):
    assert sampling_variance(count, 0.1) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("count, rel", [(10_000, 0.02), (1000, 0.05), (100, 0.25)])
def test_sampling_variance_matches_thinning_simulation(count, rel, rng):
    # first-order approximation: error shrinks as the expected sample f*count grows
    empirical = _binomial_log_var(count, 0.1, rng)
    assert sampling_variance(count, 0.1) == pytest.approx(empirical, rel=rel)


def test_sampling_variance_complete_enumeration():
    assert sampling_variance(500, 1.0) == 0.0


def test_sampling_variance_rejects_nonpositive():
    with pytest.raises(ValueError):
        sampling_variance(0)


@settings(max_examples=60, deadline=None)
@given(st.floats(1, 1e7), st.floats(1, 1e7), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_sampling_variance_decreasing(c1, c2, f1, f2):
    if c1 < c2:
        assert sampling_variance(c1, f1) > sampling_variance(c2, f1)
    if f1 < f2:
        assert sampling_variance(c1, f1) > sampling_variance(c1, f2)


def test_aggregate_two_records():
    obs = aggregate_microdata([(17, "r", 10.0), (19, "r", 10.0)], year=1999)
    assert len(obs) == 1
    assert obs[0].index.age == 0 and obs[0].count == 20


def test_aggregate_rejects_out_of_range_age():
    rejected = []
    obs = aggregate_microdata([(52, "r", 10.0), (20, "r", 5.0)], year=1999, rejected=rejected)
    assert [o.count for o in obs] == [5.0]
    assert rejected == [(52, "r", 10.0)]


def test_aggregate_ten_records_variance():
    obs = aggregate_microdata([(20 + i % 5, "r", 10.0) for i in range(10)], year=2009)
    assert obs[0].count == 100
    assert obs[0].sampling_var_log == pytest.approx(0.09)


def test_aggregate_empty():
    assert aggregate_microdata([], year=2009) == []


records = st.lists(st.tuples(st.integers(15, 49), st.sampled_from(["r1", "r2"]),
                             st.floats(0.5, 100)), min_size=1, max_size=30)


@settings(max_examples=50, deadline=None)
@given(records, st.randoms(use_true_random=False), st.floats(0.1, 10))
def test_aggregate_order_invariant_and_linear(recs, shuffler, scale):
    base = {(o.index.age, o.index.region): o.count for o in aggregate_microdata(recs, 2009)}
    shuffled = list(recs)
    shuffler.shuffle(shuffled)
    again = {(o.index.age, o.index.region): o.count for o in aggregate_microdata(shuffled, 2009)}
    assert again.keys() == base.keys()
    for k in base:
        assert again[k] == pytest.approx(base[k], rel=1e-12)
    scaled = aggregate_microdata([(a, r, w * scale) for a, r, w in recs], 2009)
    for o in scaled:
        assert o.count == pytest.approx(scale * base[(o.index.age, o.index.region)], rel=1e-9)


def _census_frame(grid, rows):
    return pd.DataFrame(rows, columns=["year", "region_level", "region_id", "age_start", "count"])


def _empty_migration():
    return pd.DataFrame(columns=["year", "region_level", "region_id", "age_start", "direction",
                                 "count"])


def test_boundary_proportions_midpoint_and_split():
    # district X holds counties a, b; Y holds c
    g = small_grid(n_age=2, n_time=3)
    rows = []
    for age in (15, 20):
        rows += [(1979, "district", "X", age, 100.0), (1979, "district", "Y", age, 900.0),
                 (1989, "county", "a", age, 50.0), (1989, "county", "b", age, 150.0),
                 (1989, "county", "c", age, 800.0)]
    obs = build_observations(_census_frame(g, rows), _empty_migration(), g)
    props = boundary_proportions(obs, g)
    # district X share 0.1 in 1979, 0.2 in 1989 -> 0.15 in 1984
    x_share = props.prop[:, :, 0] + props.prop[:, :, 1]
    np.testing.assert_allclose(x_share[:, 1], 0.15, rtol=1e-12)
    # county split 0.25 / 0.75 of district X at every time
    np.testing.assert_allclose(props.prop[:, :, 0] / x_share, 0.25, rtol=1e-12)
    np.testing.assert_allclose(props.prop[:, 2, :2], [[0.05, 0.15]] * 2, rtol=1e-12)
    # single-county district: county prop equals district prop
    np.testing.assert_allclose(props.prop[:, :, 2], 1 - x_share, rtol=1e-12)
    np.testing.assert_allclose(props.prop.sum(axis=2), 1.0, atol=1e-12)


def test_boundary_proportions_needs_two_censuses():
    g = small_grid(n_age=2, n_time=3)
    rows = [(1989, "county", c, age, 10.0) for c in "abc" for age in (15, 20)]
    obs = build_observations(_census_frame(g, rows), _empty_migration(), g)
    with pytest.raises(InputError, match="2 censuses"):
        boundary_proportions(obs, g)


def test_boundary_proportions_needs_county_split():
    g = small_grid(n_age=2, n_time=3)
    rows = [(y, "district", d, age, 10.0) for y in (1979, 1989) for d in "XY" for age in (15, 20)]
    obs = build_observations(_census_frame(g, rows), _empty_migration(), g)
    with pytest.raises(InputError, match="county split"):
        boundary_proportions(obs, g)


def test_boundary_props_sum_to_one(world):
    np.testing.assert_allclose(world.props.prop.sum(axis=2), 1.0, atol=1e-9)


def test_build_observations_rejects_negative_count():
    g = small_grid(n_age=2, n_time=3)
    rows = [(1979, "county", "a", 15, 10.0), (1979, "county", "b", 15, -5.0)]
    with pytest.raises(InputError, match="row 3"):
        build_observations(_census_frame(g, rows), _empty_migration(), g)


def test_zero_migration_count_corrected():
    g = small_grid(n_age=2, n_time=3)
    pop = _census_frame(g, [(1979, "county", "a", 15, 10.0)])
    mig = pd.DataFrame([(1979, "county", "a", 15, "in", 0.0), (1979, "county", "a", 15, "out", 4.0)],
                       columns=_empty_migration().columns)
    obs = build_observations(pop, mig, g)
    row = obs.migration.iloc[0]
    assert row["zero_corrected"] and row["count"] == 0.5
    assert row["sampling_var_log"] == pytest.approx(2 * sampling_variance(0.5))
    assert not obs.migration.iloc[1]["zero_corrected"]


def test_load_inputs_kenya_shaped_census_years(tmp_path):
    from bayesccp import synth

    w = synth.generate(synth.WorldConfig(n_county=47, n_district=35, seed=2))
    paths = write_world(w, tmp_path)
    cfg = InputConfig(w.grid, paths["populations"], paths["migration"], paths["wpp_pop"],
                      paths["wpp_mortality"])
    obs, national, props = load_inputs(cfg)
    assert obs.census_years == [1979, 1989, 1999, 2009]
    assert obs.county_level_years() == [2009]
    assert national.wpp_pop.shape == (7, 9)
    np.testing.assert_allclose(props.prop.sum(axis=2), 1.0, atol=1e-9)


def test_missing_wpp_age_reported(tmp_path, world):
    paths = write_world(world, tmp_path)
    frame = pd.read_csv(paths["wpp_pop"])
    frame[frame["age_start"] != 45].to_csv(paths["wpp_pop"], index=False)
    with pytest.raises(InputError, match="missing WPP cell"):
        read_wpp_pop(paths["wpp_pop"], world.grid)


def test_wpp_mortality_probability_scale(tmp_path, world):
    paths = write_world(world, tmp_path)
    frame = pd.read_csv(paths["wpp_mortality"])
    frame["q"] = 1 / (1 + np.exp(-frame.pop("logit_q")))
    frame.to_csv(tmp_path / "q.csv", index=False)
    logit_q, years = read_wpp_mortality(tmp_path / "q.csv", world.grid, "prob")
    np.testing.assert_allclose(logit_q, world.national.wpp_logit_q, atol=1e-9)


def test_missing_file_named(tmp_path, world):
    with pytest.raises(FileNotFoundError, match="nowhere.csv"):
        read_wpp_pop(tmp_path / "nowhere.csv", world.grid)


def test_boundary_proportions_type_checks_sums():
    with pytest.raises(Exception):
        BoundaryProportions(np.full((2, 2, 2), 0.3))
