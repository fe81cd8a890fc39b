"""Index spaces for the age x time x region lattice and the county/district hierarchy."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd


class GridError(ValueError):
    """Raised when a grid violates one of its structural invariants."""


class CellIndex(NamedTuple):
    age: int
    time: int
    region: str


@dataclass(frozen=True)
class ModelGrid:
    """Age groups, time points and the region hierarchy.

    ``age_groups`` holds the lower bound (in years) of each age group and
    ``time_points`` the calendar years of the model periods.
    """

    age_groups: tuple[int, ...]
    time_points: tuple[int, ...]
    counties: tuple[str, ...]
    districts: tuple[str, ...]
    county_to_district: dict[str, str]
    age_width: int = 5
    county_to_province: dict[str, str] = field(default_factory=dict)

    @property
    def n_age(self) -> int:
        return len(self.age_groups)

    @property
    def n_time(self) -> int:
        return len(self.time_points)

    @property
    def n_county(self) -> int:
        return len(self.counties)

    @property
    def n_district(self) -> int:
        return len(self.districts)


@dataclass(frozen=True)
class ValidatedGrid(ModelGrid):
    """A grid whose invariants have been checked; carries integer index maps."""

    county_index: dict[str, int] = field(default_factory=dict)
    district_index: dict[str, int] = field(default_factory=dict)
    district_of: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def time_index(self, year: int) -> int:
        try:
            return self.time_points.index(int(year))
        except ValueError:
            raise GridError(f"year {year} is not a model time point") from None

    def age_index(self, age_start: int) -> int:
        try:
            return self.age_groups.index(int(age_start))
        except ValueError:
            raise GridError(f"age group starting at {age_start} is not in the grid") from None

    def cell(self, index: CellIndex) -> tuple[int, int, str]:
        if not (0 <= index.age < self.n_age and 0 <= index.time < self.n_time):
            raise GridError(f"cell {index} out of range")
        if index.region not in self.county_index and index.region not in self.district_index:
            raise GridError(f"unknown region {index.region!r}")
        return index.age, index.time, index.region

    def is_boundary(self, age: int, time: int) -> bool:
        return age == 0 or time == 0


def validate_grid(grid: ModelGrid) -> ValidatedGrid:
    """Check the grid invariants and return an indexed copy.

    Raises:
        GridError: naming the first violated invariant.
    """
    if grid.n_age < 2:
        raise GridError("need at least 2 age groups")
    ages = np.asarray(grid.age_groups)
    if np.any(np.diff(ages) != grid.age_width):
        raise GridError("age groups must be contiguous with uniform width")
    if grid.n_time < 2:
        raise GridError("need at least 2 time points")
    steps = np.diff(np.asarray(grid.time_points))
    if np.any(steps != grid.age_width):
        raise GridError(f"time spacing != age width ({grid.age_width} years)")
    if len(set(grid.counties)) != grid.n_county:
        raise GridError("duplicate county identifiers")
    if len(set(grid.districts)) != grid.n_district:
        raise GridError("duplicate district identifiers")
    districts = set(grid.districts)
    for county in grid.counties:
        if county not in grid.county_to_district:
            raise GridError(f"orphan county {county!r}: not mapped to a district")
        if grid.county_to_district[county] not in districts:
            raise GridError(
                f"county {county!r} maps to unknown district {grid.county_to_district[county]!r}"
            )
    extra = set(grid.county_to_district) - set(grid.counties)
    if extra:
        raise GridError(f"mapping references unknown counties: {sorted(extra)}")
    used = set(grid.county_to_district[c] for c in grid.counties)
    for d in grid.districts:
        if d not in used:
            raise GridError(f"empty district {d!r}: no county maps to it")

    county_index = {c: i for i, c in enumerate(grid.counties)}
    district_index = {d: i for i, d in enumerate(grid.districts)}
    district_of = np.array(
        [district_index[grid.county_to_district[c]] for c in grid.counties], dtype=np.int64
    )
    return ValidatedGrid(
        age_groups=tuple(int(a) for a in grid.age_groups),
        time_points=tuple(int(t) for t in grid.time_points),
        counties=tuple(grid.counties),
        districts=tuple(grid.districts),
        county_to_district=dict(grid.county_to_district),
        age_width=grid.age_width,
        county_to_province=dict(grid.county_to_province),
        county_index=county_index,
        district_index=district_index,
        district_of=district_of,
    )


def district_counties(grid: ModelGrid, district: str) -> set[str]:
    """Counties whose map image is ``district``."""
    if district not in grid.districts:
        raise GridError(f"unknown district {district!r}")
    return {c for c in grid.counties if grid.county_to_district[c] == district}


def color_classes(grid: ValidatedGrid) -> list[np.ndarray]:
    """Partition counties so that no class holds two counties of one district.

    Class ``k`` holds the ``k``-th county of every district with at least
    ``k + 1`` counties.
    """
    members: dict[int, list[int]] = {}
    for c, d in enumerate(grid.district_of):
        members.setdefault(int(d), []).append(c)
    n_classes = max(len(v) for v in members.values())
    return [
        np.array(sorted(v[k] for v in members.values() if len(v) > k), dtype=np.int64)
        for k in range(n_classes)
    ]


def parse_years(spec: str) -> tuple[int, ...]:
    """Parse ``start:stop:step`` (inclusive stop) or a comma-separated list."""
    spec = spec.strip()
    if ":" in spec:
        start, stop, step = (int(x) for x in spec.split(":"))
        return tuple(range(start, stop + 1, step))
    return tuple(int(x) for x in spec.split(","))


def read_grid(
    path: str | Path,
    age_start: int = 15,
    age_width: int = 5,
    n_age: int = 7,
    years: str | tuple[int, ...] = "1979:2019:5",
) -> ValidatedGrid:
    """Build a grid from a ``county_id,district_id[,province_id]`` CSV."""
    table = pd.read_csv(path, dtype=str)
    missing = {"county_id", "district_id"} - set(table.columns)
    if missing:
        raise GridError(f"{path}: missing columns {sorted(missing)}")
    if isinstance(years, str):
        years = parse_years(years)
    counties = tuple(table["county_id"])
    districts = tuple(dict.fromkeys(table["district_id"]))
    provinces = {}
    if "province_id" in table.columns:
        provinces = dict(zip(table["county_id"], table["province_id"]))
    grid = ModelGrid(
        age_groups=tuple(age_start + age_width * i for i in range(n_age)),
        time_points=tuple(years),
        counties=counties,
        districts=districts,
        county_to_district=dict(zip(table["county_id"], table["district_id"])),
        age_width=age_width,
        county_to_province=provinces,
    )
    return validate_grid(grid)


def write_grid(grid: ModelGrid, path: str | Path) -> None:
    rows = {"county_id": list(grid.counties),
            "district_id": [grid.county_to_district[c] for c in grid.counties]}
    if grid.county_to_province:
        rows["province_id"] = [grid.county_to_province[c] for c in grid.counties]
    pd.DataFrame(rows).to_csv(path, index=False)


def kenya_grid() -> ValidatedGrid:
    """The 47-county / 35-district Kenya configuration, 1979-2019."""
    from importlib.resources import files

    path = files("bayesccp") / "data" / "kenya_county_district.csv"
    return read_grid(str(path))
