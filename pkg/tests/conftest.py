import numpy as np
import pytest

from bayesccp import synth
from bayesccp.grids import ModelGrid, validate_grid
from bayesccp.posterior import ModelData


def small_grid(n_age=3, n_time=4, counties=("a", "b", "c"), mapping=None):
    mapping = mapping or {"a": "X", "b": "X", "c": "Y"}
    districts = tuple(dict.fromkeys(mapping[c] for c in counties))
    return validate_grid(ModelGrid(
        age_groups=tuple(15 + 5 * i for i in range(n_age)),
        time_points=tuple(1979 + 5 * t for t in range(n_time)),
        counties=tuple(counties),
        districts=districts,
        county_to_district=dict(mapping),
    ))


@pytest.fixture(scope="session")
def world():
    return synth.generate(synth.WorldConfig(seed=11))


@pytest.fixture(scope="session")
def model_data(world):
    return ModelData.build(world.grid, world.observations, world.national, world.props)


@pytest.fixture(scope="session")
def tiny_world():
    cfg = synth.WorldConfig(n_age=3, n_time=5, n_county=3, n_district=2, seed=5)
    return synth.generate(cfg)


@pytest.fixture(scope="session")
def tiny_data(tiny_world):
    w = tiny_world
    return ModelData.build(w.grid, w.observations, w.national, w.props)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one pass/fail line per acceptance criterion, shown in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    ran = set(ACCEPTANCE)
    selected = getattr(terminalreporter.config, "_acceptance_selected", set())
    if not ran and not selected:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ran | selected):
        if number in ACCEPTANCE:
            passed, detail = ACCEPTANCE[number]
            terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {number:2d}: FAIL  did not complete")


def pytest_collection_finish(session):
    session.config._acceptance_selected = {
        number for item in session.items for mark in item.iter_markers("criterion")
        for number in mark.args}
