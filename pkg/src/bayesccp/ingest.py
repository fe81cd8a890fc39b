"""Loading census observations, national WPP inputs and boundary proportions."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd
from scipy.special import logit

from .grids import CellIndex, ValidatedGrid

log = logging.getLogger(__name__)

DEFAULT_SAMPLING_FRACTION = 0.1
ZERO_COUNT_REPLACEMENT = 0.5

POPULATION_COLUMNS = ["year", "region_level", "region_id", "age_start", "count"]
MIGRATION_COLUMNS = ["year", "region_level", "region_id", "age_start", "direction", "count"]
WPP_POP_COLUMNS = ["year", "age_start", "count"]
MICRODATA_COLUMNS = ["age", "region_id", "weight"]
BOUNDARY_COLUMNS = ["year", "age_start", "county_id", "prop"]


class InputError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class PopulationObservation:
    index: CellIndex
    count: float
    sampling_var_log: float
    region_level: str = "county"


@dataclass(frozen=True)
class MigrationObservation:
    index: CellIndex
    direction: str
    count: float
    sampling_var_log: float
    region_level: str = "county"
    zero_corrected: bool = False


@dataclass
class ObservationSet:
    """Census population and migration observations in long format.

    Both tables carry ``t``/``a`` grid indices, ``region_idx`` (county or
    district index depending on ``region_level``), ``count`` and
    ``sampling_var_log``.  Migration rows add ``direction`` and
    ``zero_corrected``.
    """

    population: pd.DataFrame
    migration: pd.DataFrame

    @property
    def census_years(self) -> list[int]:
        return sorted(set(self.population["year"]))

    def county_level_years(self) -> list[int]:
        pop = self.population
        return sorted(set(pop.loc[pop["region_level"] == "county", "year"]))


@dataclass
class NationalInputs:
    """National population counts (A x T) and logit 5q_x schedules (N x A)."""

    wpp_pop: np.ndarray
    wpp_logit_q: np.ndarray
    wpp_years: np.ndarray

    def __post_init__(self):
        self.wpp_pop = np.asarray(self.wpp_pop, dtype=float)
        self.wpp_logit_q = np.asarray(self.wpp_logit_q, dtype=float)
        self.wpp_years = np.asarray(self.wpp_years, dtype=int)
        if np.any(~(self.wpp_pop > 0)):
            raise InputError("WPP population counts must be positive")
        if self.wpp_logit_q.shape[0] != len(self.wpp_years):
            raise InputError("one WPP mortality schedule per year required")


@dataclass
class BoundaryProportions:
    """County shares of the national population, ``prop[a, t, c]``.

    Only the first-age row and first-time column enter the model; the full
    array is kept for plotting and diagnostics.
    """

    prop: np.ndarray

    def __post_init__(self):
        self.prop = np.asarray(self.prop, dtype=float)
        if np.any(~(self.prop > 0)) or np.any(self.prop >= 1 + 1e-12):
            raise InputError("boundary proportions must lie in (0, 1)")
        sums = self.prop.sum(axis=2)
        if np.any(np.abs(sums[0, :] - 1) > 1e-9) or np.any(np.abs(sums[:, 0] - 1) > 1e-9):
            raise InputError("boundary proportions must sum to 1 over counties")

    @property
    def first_time(self) -> np.ndarray:
        return self.prop[:, 0, :]

    @property
    def first_age(self) -> np.ndarray:
        return self.prop[0, :, :]


@dataclass
class InputConfig:
    grid: ValidatedGrid
    populations: Path
    migration: Path
    wpp_pop: Path
    wpp_mortality: Path
    q_scale: str = "logit"
    boundary_props: Path | None = None
    sampling_fraction: float = DEFAULT_SAMPLING_FRACTION
    census_sampling_fraction: Mapping[int, float] = field(default_factory=dict)

    def fraction_for(self, year: int) -> float:
        return float(self.census_sampling_fraction.get(int(year), self.sampling_fraction))


def sampling_variance(count, sampling_fraction: float = DEFAULT_SAMPLING_FRACTION):
    """Variance of the log of a count weighted up from an ``f``-sample.

    Delta method for binomial thinning: ``(1 - f) / (f * count)``.
    """
    count = np.asarray(count, dtype=float)
    if np.any(~(count > 0)):
        raise ValueError("count must be positive")
    f = float(sampling_fraction)
    if not 0 < f <= 1:
        raise ValueError("sampling fraction must be in (0, 1]")
    out = (1.0 - f) / (f * count)
    return out if out.ndim else float(out)


def age_group_of(age_years: float, age_start: int = 15, age_width: int = 5, n_age: int = 7):
    """Lower bound of the age group holding ``age_years``, or None if outside."""
    if age_years < age_start or age_years >= age_start + age_width * n_age:
        return None
    return age_start + age_width * int((age_years - age_start) // age_width)


def aggregate_microdata(
    records: Iterable[tuple[float, str, float]],
    year: int,
    time_index: int = 0,
    region_level: str = "county",
    sampling_fraction: float = DEFAULT_SAMPLING_FRACTION,
    age_start: int = 15,
    age_width: int = 5,
    n_age: int = 7,
    rejected: list | None = None,
) -> list[PopulationObservation]:
    """Sum person weights into (age group, region) population counts.

    Records with an age outside the modelled range are skipped, logged and
    appended to ``rejected`` when given.  ``year`` is informational; the
    observations are indexed by ``time_index``.
    """
    totals: dict[tuple[int, str], float] = defaultdict(float)
    for age, region, weight in records:
        if not weight > 0:
            raise InputError(f"non-positive weight {weight} for region {region!r}")
        group = age_group_of(age, age_start, age_width, n_age)
        if group is None:
            log.warning("rejecting record aged %s in %s (outside %d-%d)",
                        age, region, age_start, age_start + age_width * n_age - 1)
            if rejected is not None:
                rejected.append((age, region, weight))
            continue
        totals[(group, str(region))] += float(weight)
    out = []
    for (group, region), count in sorted(totals.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        a = (group - age_start) // age_width
        out.append(PopulationObservation(
            index=CellIndex(a, time_index, region),
            count=count,
            sampling_var_log=sampling_variance(count, sampling_fraction),
            region_level=region_level,
        ))
    return out


def microdata_to_frame(observations: list[PopulationObservation], year: int,
                       age_start: int = 15, age_width: int = 5) -> pd.DataFrame:
    """Population-CSV rows for aggregated microdata."""
    return pd.DataFrame({
        "year": [year] * len(observations),
        "region_level": [o.region_level for o in observations],
        "region_id": [o.index.region for o in observations],
        "age_start": [age_start + age_width * o.index.age for o in observations],
        "count": [o.count for o in observations],
    }, columns=POPULATION_COLUMNS)


def _interp_extrap(x: np.ndarray, y: np.ndarray, at: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation with linear extrapolation off both ends."""
    out = np.interp(at, x, y)
    lo, hi = at < x[0], at > x[-1]
    if lo.any():
        slope = (y[1] - y[0]) / (x[1] - x[0])
        out[lo] = y[0] + slope * (at[lo] - x[0])
    if hi.any():
        slope = (y[-1] - y[-2]) / (x[-1] - x[-2])
        out[hi] = y[-1] + slope * (at[hi] - x[-1])
    return out


def district_table(population: pd.DataFrame, grid: ValidatedGrid) -> dict[int, np.ndarray]:
    """Observed counts per census year summed to districts, ``{year: (A, D)}``."""
    A, D = grid.n_age, grid.n_district
    tables = {}
    for year, rows in population.groupby("year"):
        table = np.zeros((A, D))
        seen = np.zeros((A, D), dtype=bool)
        for row in rows.itertuples():
            if row.region_level == "district":
                d = grid.district_index[row.region_id]
            else:
                d = grid.district_of[grid.county_index[row.region_id]]
            table[row.a, d] += row.count
            seen[row.a, d] = True
        if not seen.all():
            raise InputError(f"census {year}: incomplete district coverage")
        tables[int(year)] = table
    return tables


def boundary_proportions(censuses: ObservationSet | pd.DataFrame, grid: ValidatedGrid) -> BoundaryProportions:
    """County shares by interpolating district shares between censuses.

    District shares are linearly interpolated between census years and
    linearly extrapolated beyond them (clamped inside (0, 1)); the split of
    each district between its counties is held at the county-level census.
    """
    population = censuses.population if isinstance(censuses, ObservationSet) else censuses
    years = sorted(set(population["year"]))
    if len(years) < 2:
        raise InputError("need at least 2 censuses to interpolate district shares")
    county_years = sorted(set(population.loc[population["region_level"] == "county", "year"]))
    if not county_years:
        raise InputError("missing county split: no county-level census")
    split_year = county_years[-1]

    tables = district_table(population, grid)
    A, T, C = grid.n_age, grid.n_time, grid.n_county
    x = np.array(years, dtype=float)
    shares = np.stack([tables[y] / tables[y].sum(axis=1, keepdims=True) for y in years])  # (Y, A, D)
    at = np.array(grid.time_points, dtype=float)
    eps = 1e-6
    district_share = np.empty((A, T, grid.n_district))
    for a in range(A):
        for d in range(grid.n_district):
            district_share[a, :, d] = np.clip(_interp_extrap(x, shares[:, a, d], at), eps, 1 - eps)

    rows = population[(population["year"] == split_year) & (population["region_level"] == "county")]
    county = np.full((A, C), np.nan)
    for row in rows.itertuples():
        county[row.a, grid.county_index[row.region_id]] = row.count
    if np.isnan(county).any():
        raise InputError(f"missing county split: census {split_year} lacks some county/age cells")
    dist_tot = np.zeros((A, grid.n_district))
    np.add.at(dist_tot.T, grid.district_of, county.T)
    split = county / dist_tot[:, grid.district_of]

    prop = district_share[:, :, grid.district_of] * split[:, None, :]
    prop /= prop.sum(axis=2, keepdims=True)
    return BoundaryProportions(prop)


def _require_columns(frame: pd.DataFrame, columns: list[str], path) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise InputError(f"{path}: missing columns {missing}")


def _read_csv(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    try:
        return pd.read_csv(path, dtype={"region_id": str, "county_id": str},
                           float_precision="round_trip")
    except (pd.errors.ParserError, UnicodeDecodeError) as err:
        raise InputError(f"{path}: cannot parse ({err})") from err


def _index_rows(frame: pd.DataFrame, grid: ValidatedGrid, path, allow_zero: bool) -> pd.DataFrame:
    frame = frame.copy()
    t_idx, a_idx, r_idx = [], [], []
    for i, row in enumerate(frame.itertuples(index=False)):
        line = i + 2
        count = row.count
        if not np.isfinite(count) or count < 0 or (count == 0 and not allow_zero):
            raise InputError(f"{path}: row {line}: invalid count {count}")
        if row.year not in grid.time_points:
            raise InputError(f"{path}: row {line}: year {row.year} is not a model time point")
        if row.age_start not in grid.age_groups:
            raise InputError(f"{path}: row {line}: age group {row.age_start} not in grid")
        if row.region_level == "county":
            lookup = grid.county_index
        elif row.region_level == "district":
            lookup = grid.district_index
        else:
            raise InputError(f"{path}: row {line}: region_level must be county or district")
        if row.region_id not in lookup:
            raise InputError(f"{path}: row {line}: unknown {row.region_level} {row.region_id!r}")
        t_idx.append(grid.time_index(row.year))
        a_idx.append(grid.age_index(row.age_start))
        r_idx.append(lookup[row.region_id])
    frame["t"] = np.asarray(t_idx, dtype=np.int64)
    frame["a"] = np.asarray(a_idx, dtype=np.int64)
    frame["region_idx"] = np.asarray(r_idx, dtype=np.int64)
    return frame


def build_observations(population: pd.DataFrame, migration: pd.DataFrame, grid: ValidatedGrid,
                       fraction_for=lambda year: DEFAULT_SAMPLING_FRACTION,
                       pop_path="populations", mig_path="migration") -> ObservationSet:
    """Validate raw census tables and attach grid indices and sampling variances."""
    _require_columns(population, POPULATION_COLUMNS, pop_path)
    _require_columns(migration, MIGRATION_COLUMNS, mig_path)
    population = population[POPULATION_COLUMNS].copy()
    migration = migration[MIGRATION_COLUMNS].copy()
    population["region_id"] = population["region_id"].astype(str)
    migration["region_id"] = migration["region_id"].astype(str)
    population = _index_rows(population, grid, pop_path, allow_zero=False)
    migration = _index_rows(migration, grid, mig_path, allow_zero=True)

    bad = ~migration["direction"].isin(["in", "out"])
    if bad.any():
        line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
        raise InputError(f"{mig_path}: row {line}: direction must be 'in' or 'out'")

    f_pop = population["year"].map(fraction_for).astype(float)
    population["sampling_var_log"] = (1 - f_pop) / (f_pop * population["count"])
    zero = migration["count"] <= 0
    migration["zero_corrected"] = zero
    counts = migration["count"].astype(float).where(~zero, ZERO_COUNT_REPLACEMENT)
    migration["count"] = counts
    f_mig = migration["year"].map(fraction_for).astype(float)
    var = (1 - f_mig) / (f_mig * counts)
    migration["sampling_var_log"] = np.where(zero, 2 * var, var)
    if zero.any():
        log.info("replaced %d zero migration counts by %.1f (doubled variance)",
                 int(zero.sum()), ZERO_COUNT_REPLACEMENT)
    return ObservationSet(population.reset_index(drop=True), migration.reset_index(drop=True))


def read_wpp_pop(path, grid: ValidatedGrid) -> np.ndarray:
    """National counts matched to model years (nearest WPP year within half a step)."""
    frame = _read_csv(path)
    _require_columns(frame, WPP_POP_COLUMNS, path)
    if (frame["count"] <= 0).any():
        line = int(np.flatnonzero((frame["count"] <= 0).to_numpy())[0]) + 2
        raise InputError(f"{path}: row {line}: WPP count must be positive")
    years = np.array(sorted(set(frame["year"])))
    out = np.full((grid.n_age, grid.n_time), np.nan)
    lookup = {(int(r.year), int(r.age_start)): float(r.count) for r in frame.itertuples()}
    for t, year in enumerate(grid.time_points):
        nearest = int(years[np.argmin(np.abs(years - year))])
        if abs(nearest - year) * 2 > grid.age_width:
            raise InputError(f"{path}: missing WPP cell: no estimate near year {year}")
        for a, age in enumerate(grid.age_groups):
            if (nearest, age) not in lookup:
                raise InputError(f"{path}: missing WPP cell (year {nearest}, age {age})")
            out[a, t] = lookup[(nearest, age)]
    return out


def read_wpp_mortality(path, grid: ValidatedGrid, q_scale: str = "logit") -> tuple[np.ndarray, np.ndarray]:
    """WPP mortality schedules as an (N, A) logit matrix and their years."""
    frame = _read_csv(path)
    column = {"logit": "logit_q", "prob": "q"}.get(q_scale)
    if column is None:
        raise InputError(f"q_scale must be 'logit' or 'prob', got {q_scale!r}")
    _require_columns(frame, ["year", "age_start", column], path)
    years = sorted(set(int(y) for y in frame["year"]))
    out = np.full((len(years), grid.n_age), np.nan)
    for r in frame.itertuples():
        if r.age_start not in grid.age_groups:
            continue
        value = float(getattr(r, column))
        if q_scale == "prob":
            if not 0 < value < 1:
                raise InputError(f"{path}: q must lie in (0, 1), got {value}")
            value = float(logit(value))
        out[years.index(int(r.year)), grid.age_index(r.age_start)] = value
    if np.isnan(out).any():
        n, a = np.argwhere(np.isnan(out))[0]
        raise InputError(f"{path}: missing WPP cell (year {years[n]}, age {grid.age_groups[a]})")
    return out, np.array(years)


def read_boundary_props(path, grid: ValidatedGrid) -> BoundaryProportions:
    """Boundary proportions supplied directly (``year,age_start,county_id,prop``).

    Cells absent from the file are left to be filled from the census-derived
    proportions by the caller; here every boundary cell must be present.
    """
    frame = _read_csv(path)
    _require_columns(frame, BOUNDARY_COLUMNS, path)
    A, T, C = grid.n_age, grid.n_time, grid.n_county
    prop = np.full((A, T, C), np.nan)
    for r in frame.itertuples():
        prop[grid.age_index(r.age_start), grid.time_index(r.year), grid.county_index[str(r.county_id)]] = r.prop
    boundary = np.zeros((A, T), dtype=bool)
    boundary[0, :] = True
    boundary[:, 0] = True
    if np.isnan(prop[boundary]).any():
        raise InputError(f"{path}: missing boundary proportion cells")
    # interior cells are unused by the model; fill with the nearest boundary column
    for a in range(1, A):
        for t in range(1, T):
            if np.isnan(prop[a, t]).any():
                prop[a, t] = prop[a, 0]
    return BoundaryProportions(prop)


def write_boundary_props(props: BoundaryProportions, grid: ValidatedGrid, path) -> None:
    rows = []
    for a, age in enumerate(grid.age_groups):
        for t, year in enumerate(grid.time_points):
            if a and t:
                continue
            for c, county in enumerate(grid.counties):
                rows.append((year, age, county, props.prop[a, t, c]))
    pd.DataFrame(rows, columns=BOUNDARY_COLUMNS).to_csv(path, index=False, float_format="%.17g")


def load_inputs(config: InputConfig) -> tuple[ObservationSet, NationalInputs, BoundaryProportions]:
    """Read, validate and index every model input."""
    grid = config.grid
    population = _read_csv(config.populations)
    migration = _read_csv(config.migration)
    obs = build_observations(population, migration, grid, config.fraction_for,
                             pop_path=config.populations, mig_path=config.migration)
    wpp_pop = read_wpp_pop(config.wpp_pop, grid)
    logit_q, years = read_wpp_mortality(config.wpp_mortality, grid, config.q_scale)
    national = NationalInputs(wpp_pop=wpp_pop, wpp_logit_q=logit_q, wpp_years=years)
    if config.boundary_props is not None:
        props = read_boundary_props(config.boundary_props, grid)
    else:
        props = boundary_proportions(obs, grid)
    return obs, national, props
