"""Out-of-sample evaluation of projected populations against held-out counts."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .grids import ValidatedGrid

HEADLINE_LEVEL = 0.90
LEVELS = (0.90, 0.95)
TABLE1_COLUMNS = ["age", "method", "mean", "median", "rmse"]
METHODS = ("interpolation", "bayes")
# one row per age plus Total, one column per statistic and method
TABLE1_WIDE_COLUMNS = ["age"] + [f"{stat}_{method}" for stat in ("mean", "median", "rmse")
                                 for method in METHODS]
TABLE2_COLUMNS = ["age", "in", "above", "below"]
PIT_COLUMNS = ["group", "pit"]


class ValidationError(ValueError):
    pass


@dataclass
class EvalCase:
    """One held-out count with its posterior summary.

    Attributes:
        group: label of the age-by-region cell.
        age: age group (lower bound in years).
        y: observed count, strictly positive.
        eta_hat: posterior median.
        lower, upper: interval limits at ``level``.
        samples: posterior draws used for the PIT.
    """

    group: str
    age: int
    y: float
    eta_hat: float
    lower: float
    upper: float
    level: float
    samples: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def __post_init__(self):
        if not self.y > 0:
            raise ValidationError(f"{self.group}: observed count must be positive, got {self.y}")
        if not self.lower <= self.eta_hat <= self.upper:
            raise ValidationError(f"{self.group}: interval does not contain the point estimate")

    @classmethod
    def from_samples(cls, group: str, age: int, y: float, samples, level: float = HEADLINE_LEVEL):
        samples = np.asarray(samples, dtype=float)
        if samples.size == 0:
            raise ValidationError(f"{group}: no posterior samples")
        tail = (1 - level) / 2
        lower, median, upper = np.quantile(samples, [tail, 0.5, 1 - tail])
        return cls(group, age, float(y), float(median), float(lower), float(upper), level, samples)


@dataclass
class EvalReport:
    """Error summaries, coverage tables by level and PIT values."""

    errors: pd.DataFrame
    coverage: dict[float, pd.DataFrame]
    pit: pd.DataFrame

    @property
    def table1(self) -> pd.DataFrame:
        """Error summaries in long form, one row per age group and method."""
        return self.errors[TABLE1_COLUMNS]

    @property
    def table1_wide(self) -> pd.DataFrame:
        """Error summaries with one row per age group plus ``Total`` and one
        column per statistic and method."""
        wide = self.errors.pivot(index="age", columns="method", values=["mean", "median", "rmse"])
        wide.columns = [f"{stat}_{method}" for stat, method in wide.columns]
        order = list(dict.fromkeys(self.errors["age"]))
        wide = wide.loc[order].reset_index()
        return wide[TABLE1_WIDE_COLUMNS]

    @property
    def table2(self) -> pd.DataFrame:
        return self.coverage[HEADLINE_LEVEL]

    def rmse(self, method: str, age="Total") -> float:
        rows = self.errors
        row = rows[(rows["method"] == method) & (rows["age"].astype(str) == str(age))]
        return float(row["rmse"].iloc[0])

    def write(self, directory: str | Path) -> dict[str, Path]:
        """Write ``table1.csv`` (long), ``table1_wide.csv``, ``table2.csv`` (90%),
        ``table2_95.csv`` and ``pit.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {"table1": directory / "table1.csv", "table1_wide": directory / "table1_wide.csv",
                 "pit": directory / "pit.csv"}
        self.table1.to_csv(paths["table1"], index=False, float_format="%.6g")
        self.table1_wide.to_csv(paths["table1_wide"], index=False, float_format="%.6g")
        for level, table in self.coverage.items():
            key = "table2" if level == HEADLINE_LEVEL else f"table2_{round(level * 100)}"
            paths[key] = directory / f"{key}.csv"
            table[TABLE2_COLUMNS].to_csv(paths[key], index=False, float_format="%.6g")
        self.pit[PIT_COLUMNS].to_csv(paths["pit"], index=False, float_format="%.6g")
        return paths


def relative_error(y, eta_hat):
    """Relative error ``(y - eta_hat) / y``; positive when the estimate is too low."""
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0)):
        raise ValidationError("observed counts must be positive")
    out = (y - np.asarray(eta_hat, dtype=float)) / y
    return float(out) if out.ndim == 0 else out


def _summary(errors: np.ndarray) -> tuple[float, float, float]:
    if errors.size == 0:
        raise ValidationError("cannot summarize an empty error group")
    return float(errors.mean()), float(np.median(errors)), float(np.sqrt(np.mean(errors ** 2)))


def error_table(errors_by_age: dict, method: str | None = None) -> pd.DataFrame:
    """Mean, median and RMSE of relative errors per age plus a pooled ``Total`` row.

    Args:
        errors_by_age: mapping from age group to an array of relative errors.
        method: optional label stored in a ``method`` column.
    """
    if not errors_by_age:
        raise ValidationError("no error groups")
    rows = []
    for age, errs in errors_by_age.items():
        rows.append((age, *_summary(np.asarray(errs, dtype=float).ravel())))
    pooled = np.concatenate([np.asarray(e, dtype=float).ravel() for e in errors_by_age.values()])
    rows.append(("Total", *_summary(pooled)))
    table = pd.DataFrame(rows, columns=["age", "mean", "median", "rmse"])
    if method is not None:
        table.insert(1, "method", method)
    return table


def _classify(y, lower, upper) -> np.ndarray:
    # 0 inside (lower, upper], 1 above, 2 below
    return np.where(y > upper, 1, np.where(y <= lower, 2, 0))


def coverage(cases: Sequence[EvalCase], level: float = HEADLINE_LEVEL) -> pd.DataFrame:
    """Share of observations inside, above and below their intervals, per age.

    A count equal to the upper limit is inside; one equal to the lower limit
    is below.
    """
    if not cases:
        raise ValidationError("no evaluation cases")
    for case in cases:
        if not np.isclose(case.level, level):
            raise ValidationError(f"{case.group}: interval level {case.level} != {level}")
    frame = pd.DataFrame({
        "age": [c.age for c in cases],
        "where": _classify(np.array([c.y for c in cases]), np.array([c.lower for c in cases]),
                           np.array([c.upper for c in cases])),
    })
    rows = []
    for age, grp in frame.groupby("age", sort=True):
        n = len(grp)
        counts = np.bincount(grp["where"].to_numpy(), minlength=3)
        above, below = counts[1] / n, counts[2] / n
        rows.append((age, 1.0 - above - below, above, below))
    return pd.DataFrame(rows, columns=TABLE2_COLUMNS)


def pit(samples, y: float) -> float:
    """Fraction of posterior samples at or below the observation."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValidationError("no samples for PIT")
    return float(np.count_nonzero(samples <= y) / samples.size)


def linear_baseline(pop_t1, pop_t2):
    """Carry the proportional change between two censuses forward one more interval."""
    p1 = np.asarray(pop_t1, dtype=float)
    p2 = np.asarray(pop_t2, dtype=float)
    if np.any(~(p1 > 0)) or np.any(~(p2 > 0)):
        raise ValidationError("baseline populations must be positive")
    out = p2 * (p2 / p1)
    return float(out) if out.ndim == 0 else out


def district_census_table(population: pd.DataFrame, grid: ValidatedGrid) -> dict[int, np.ndarray]:
    """Observed census counts aggregated to districts, keyed by year, shape (A, D).

    Years lacking a count for some district and age are left out.
    """
    out = {}
    A, D = grid.n_age, grid.n_district
    for year, rows in population.groupby("year"):
        table = np.zeros((A, D))
        seen = np.zeros((A, D), dtype=bool)
        for row in rows.itertuples(index=False):
            a = grid.age_index(row.age_start)
            if row.region_level == "county":
                d = grid.district_of[grid.county_index[row.region_id]]
            else:
                d = grid.district_index[row.region_id]
            table[a, d] += row.count
            seen[a, d] = True
        if seen.all():
            out[int(year)] = table
    return out


def _holdout_cells(holdout: pd.DataFrame, grid: ValidatedGrid, year: int) -> np.ndarray:
    """Held-out county counts as an (A, C) array; NaN where missing."""
    rows = holdout[holdout["year"] == year]
    if rows.empty:
        raise ValidationError(f"holdout table has no rows for {year}")
    y = np.full((grid.n_age, grid.n_county), np.nan)
    for row in rows.itertuples(index=False):
        if row.region_level != "county":
            raise ValidationError("holdout counts must be at county level")
        if str(row.region_id) not in grid.county_index:
            raise ValidationError(f"holdout county {row.region_id!r} is not in the grid")
        y[grid.age_index(row.age_start), grid.county_index[str(row.region_id)]] = row.count
    return y


def evaluate_holdout(eta_samples: np.ndarray, holdout: pd.DataFrame, population: pd.DataFrame,
                     grid: ValidatedGrid, year: int, levels: Sequence[float] = LEVELS) -> EvalReport:
    """Compare projected populations at ``year`` with held-out census counts.

    Args:
        eta_samples: posterior draws of county populations at ``year``,
            shape (S, A, C).
        holdout: county-level counts (``year, region_level, region_id,
            age_start, count``).
        population: the fitted census table, used for the interpolation
            baseline and to check that ``year`` lies beyond the fitting window.
        grid: the model grid.
        year: the held-out year.
        levels: interval levels for the coverage tables; the first
            headline level must be among them.

    Returns:
        EvalReport with district-level error summaries for both methods,
        county-level coverage per level and county-level PIT values.
    """
    if holdout is None or len(holdout) == 0:
        raise ValidationError("holdout table is empty")
    fitted_years = sorted(set(population["year"]))
    if fitted_years and year <= fitted_years[-1]:
        raise ValidationError(f"holdout year {year} is not beyond the last fitted census "
                              f"{fitted_years[-1]}")
    if HEADLINE_LEVEL not in levels:
        raise ValidationError(f"levels must include {HEADLINE_LEVEL}")
    eta_samples = np.asarray(eta_samples, dtype=float)
    A, C, D = grid.n_age, grid.n_county, grid.n_district
    if eta_samples.ndim != 3 or eta_samples.shape[1:] != (A, C):
        raise ValidationError(f"eta samples must have shape (S, {A}, {C})")
    y = _holdout_cells(holdout, grid, year)

    ages = grid.age_groups
    cases = {lev: [] for lev in levels}
    pit_rows = []
    for a in range(A):
        for c in range(C):
            if np.isnan(y[a, c]):
                continue
            group = f"{grid.counties[c]}:{ages[a]}"
            for lev in levels:
                cases[lev].append(EvalCase.from_samples(group, ages[a], y[a, c],
                                                        eta_samples[:, a, c], lev))
            pit_rows.append((group, pit(eta_samples[:, a, c], y[a, c])))
    if not pit_rows:
        raise ValidationError(f"no holdout counts for {year}")

    # district level: only districts whose counties are all held out
    district_y = np.zeros((A, D))
    complete = np.ones((A, D), dtype=bool)
    for c in range(C):
        d = grid.district_of[c]
        district_y[:, d] += np.nan_to_num(y[:, c])
        complete[:, d] &= ~np.isnan(y[:, c])
    district_samples = np.zeros((eta_samples.shape[0], A, D))
    for c in range(C):
        district_samples[:, :, grid.district_of[c]] += eta_samples[:, :, c]
    bayes = np.median(district_samples, axis=0)

    censuses = district_census_table(population, grid)
    earlier = [yr for yr in sorted(censuses) if yr < year]
    if len(earlier) < 2:
        raise ValidationError("the interpolation baseline needs two earlier censuses")
    interp = linear_baseline(censuses[earlier[-2]], censuses[earlier[-1]])

    tables = []
    for method, estimate in zip(METHODS, (interp, bayes)):
        errs = {ages[a]: relative_error(district_y[a, complete[a]], estimate[a, complete[a]])
                for a in range(A) if complete[a].any()}
        if not errs:
            raise ValidationError("no district has complete holdout counts")
        tables.append(error_table(errs, method))
    errors = pd.concat(tables, ignore_index=True)
    order = {age: i for i, age in enumerate(list(ages) + ["Total"])}
    errors = errors.sort_values(["age", "method"], key=lambda s: s.map(order) if s.name == "age"
                                else s.map({"interpolation": 0, "bayes": 1}), kind="stable")
    return EvalReport(errors.reset_index(drop=True),
                      {lev: coverage(cases[lev], lev) for lev in levels},
                      pd.DataFrame(pit_rows, columns=PIT_COLUMNS))
