"""Synthetic ground-truth worlds with census-like noisy observations."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import logit
from scipy.stats import truncnorm

from .grids import ModelGrid, ValidatedGrid, validate_grid, write_grid
from .ingest import (
    BoundaryProportions,
    NationalInputs,
    ObservationSet,
    build_observations,
    write_boundary_props,
)
from .mortality_basis import MortalityBasis, build_basis
from .posterior import (
    BOUND_SD,
    LOWER_FACTOR,
    MIGRATION_BALANCE,
    UPPER_FACTOR,
    ConstraintBounds,
    ParameterState,
    VarianceParams,
)
from .process import (
    BoundaryPopulations,
    InvalidStateError,
    MigrationParams,
    MortalityParams,
    MultiplierParams,
    PopulationArray,
    district_sums,
    forward_populate,
)

log = logging.getLogger(__name__)

DEFAULT_SIGMAS = {"alpha": 0.1, "delta": 0.05, "in": 0.05, "out": 0.05, "zeta": 0.02}


class SynthError(RuntimeError):
    pass


@dataclass
class WorldConfig:
    """Size, seed and component magnitudes of a synthetic world.

    Census waves fall on every ``census_every``-th time point from the first.
    With ``holdout`` the last time point is withheld from the observations
    and its true populations are kept for evaluation.  The last fitted census
    is county-level, earlier ones district-level.  ``sigmas`` overrides the
    standard deviations; a ``None`` entry is drawn from its half-normal prior.
    """

    n_age: int = 7
    n_time: int = 9
    n_county: int = 8
    n_district: int = 4
    age_start: int = 15
    age_width: int = 5
    start_year: int = 1979
    census_every: int = 2
    holdout: bool = True
    seed: int = 0
    sampling_fraction: float = 0.1
    sigmas: dict = field(default_factory=lambda: dict(DEFAULT_SIGMAS))
    base_population: float = 1.0e6
    entry_growth: float = 0.13
    entry_growth_sd: float = 0.06
    cohort_sd: float = 0.05
    migration_rate: tuple[float, float] = (0.02, 0.08)
    metro_county: int = 0
    metro_factor: float = 3.0
    wpp_perturbation: float = 0.02
    migration: bool = True
    max_retries: int = 100
    grid: ValidatedGrid | None = None

    def make_grid(self) -> ValidatedGrid:
        if self.grid is not None:
            return self.grid
        if not 1 <= self.n_district <= self.n_county:
            raise SynthError("need 1 <= n_district <= n_county")
        counties = tuple(f"C{i + 1:02d}" for i in range(self.n_county))
        districts = tuple(f"D{i + 1:02d}" for i in range(self.n_district))
        mapping = {c: districts[i * self.n_district // self.n_county] for i, c in enumerate(counties)}
        n_prov = max(1, self.n_district // 2)
        province = {c: f"P{districts.index(mapping[c]) * n_prov // self.n_district + 1}"
                    for c in counties}
        grid = ModelGrid(
            age_groups=tuple(self.age_start + self.age_width * a for a in range(self.n_age)),
            time_points=tuple(self.start_year + self.age_width * t for t in range(self.n_time)),
            counties=counties,
            districts=districts,
            county_to_district=mapping,
            age_width=self.age_width,
            county_to_province=province,
        )
        return validate_grid(grid)

    def census_times(self, n_time: int) -> list[int]:
        times = list(range(0, n_time, self.census_every))
        if self.holdout and times and times[-1] == n_time - 1:
            times = times[:-1]
        return times


@dataclass
class SyntheticWorld:
    grid: ValidatedGrid
    truth: ParameterState
    eta: PopulationArray
    national: NationalInputs
    props: BoundaryProportions
    basis: MortalityBasis
    observations: ObservationSet
    populations: pd.DataFrame  # raw census tables in the ingest schema
    migration: pd.DataFrame
    holdout: pd.DataFrame
    config: WorldConfig

    @property
    def holdout_year(self) -> int:
        return self.grid.time_points[-1]


def wpp_mortality_stand_in(age_groups, schedule_years) -> np.ndarray:
    """Deterministic (N, A) logit 5q_x schedules with a secular decline and an epidemic hump.

    Mortality rises with age, falls steadily over time, and carries a
    temporary excess concentrated at ages 25-39 peaking around 2000.
    """
    ages = np.asarray(age_groups, dtype=float) + 2.5
    years = np.asarray(schedule_years, dtype=float)
    base = 0.004 * np.exp(0.055 * (ages - 17.5))
    decline = np.exp(-0.012 * (years - years[0]))
    hump_time = np.exp(-0.5 * ((years - 2000.0) / 8.0) ** 2)
    hump_age = np.exp(-0.5 * ((ages - 32.0) / 7.0) ** 2)
    return logit(base[None, :] * decline[:, None]) + 1.2 * hump_time[:, None] * hump_age[None, :]


def schedule_years_for(start_year: int, n: int = 16, step: int = 5) -> np.ndarray:
    first = int(round(start_year / step)) * step - 30
    return np.arange(first, first + n * step, step)


def _boundary_design(cfg: WorldConfig, grid: ValidatedGrid, rng):
    """National boundary counts and county proportions (A, T, C)."""
    A, T, C, D = grid.n_age, grid.n_time, grid.n_county, grid.n_district
    national = np.zeros((A, T))
    national[:, 0] = cfg.base_population * np.exp(-0.12 * np.arange(A)
                                                  + rng.normal(0, cfg.cohort_sd, A))
    for t in range(1, T):
        national[0, t] = national[0, t - 1] * np.exp(rng.normal(cfg.entry_growth, cfg.entry_growth_sd))
    start = rng.dirichlet(np.full(D, 5.0))
    end = start * np.exp(rng.normal(0, 0.15, D))
    end /= end.sum()
    frac = np.linspace(0.0, 1.0, T)
    district_share = start[None, :] + (end - start)[None, :] * frac[:, None]  # (T, D)
    split = np.zeros(C)
    for d in range(D):
        members = np.flatnonzero(grid.district_of == d)
        split[members] = rng.dirichlet(np.full(len(members), 4.0))
    county_share = district_share[:, grid.district_of] * split[None, :]  # (T, C)
    prop = np.broadcast_to(county_share[None, :, :], (A, T, C)).copy()
    by_age = county_share[0][None, :] * np.exp(rng.normal(0, 0.05, (A, C)))
    prop[:, 0, :] = by_age / by_age.sum(axis=1, keepdims=True)
    return national, BoundaryProportions(prop)


def _draw_sigmas(cfg: WorldConfig, rng) -> VarianceParams:
    values = []
    for name in ("alpha", "delta", "in", "out", "zeta"):
        v = cfg.sigmas.get(name)
        values.append(abs(rng.normal()) if v is None else float(v))
    return VarianceParams(*values)


def _draw_truth(cfg, grid, basis, national_design, props, sig, rng):
    A, T, C = grid.n_age, grid.n_time, grid.n_county
    alpha0 = rng.normal(0, sig.sigma_alpha, C)
    delta = np.cumsum(rng.normal(0, sig.sigma_delta, (T, C, 2)), axis=0)

    first_time = national_design[:, 0:1] * props.first_time * np.exp(rng.normal(0, 0.01, (A, C)))
    first_age = national_design[0, :, None] * props.first_age * np.exp(rng.normal(0, 0.01, (T, C)))
    first_age[0] = first_time[0]
    boundary = BoundaryPopulations.from_arrays(first_time, first_age)

    pop0 = first_time.sum(axis=0)
    totals = []
    for direction, sd in (("in", sig.sigma_in), ("out", sig.sigma_out)):
        level = pop0 * rng.uniform(*cfg.migration_rate, C)
        if direction == "in" and 0 <= cfg.metro_county < C:
            level[cfg.metro_county] *= cfg.metro_factor
        x = np.zeros((T, C))
        x[0] = np.log(level)
        if T > 1:
            x[1] = x[0] + rng.normal(0, sd, C)
        for t in range(2, T):
            x[t] = 2 * x[t - 1] - x[t - 2] + rng.normal(0, sd, C)
        totals.append(np.exp(x))
    if not cfg.migration:
        totals = [np.full((T, C), 1e-9), np.full((T, C), 1e-9)]
    shares_in = rng.uniform(0, 1, (A, C))
    shares_out = rng.uniform(0, 1, (A, C))
    zeta = rng.normal(0, sig.sigma_zeta, (A - 1, T, C))

    mort = MortalityParams(alpha0, delta)
    mig = MigrationParams(totals[0], totals[1], shares_in, shares_out)
    mult = MultiplierParams(zeta)
    eta = forward_populate(boundary, mort, mig, mult, basis)
    return mort, mig, mult, boundary, eta


def _balanced(mig: MigrationParams, eta: np.ndarray) -> bool:
    psi_in, psi_out = mig.flows()
    net = psi_in.sum(axis=2) - psi_out.sum(axis=2)
    limit = MIGRATION_BALANCE * eta.sum(axis=2)
    return bool(np.all((-limit < net) & (net <= limit)))


def generate(config: WorldConfig | None = None) -> SyntheticWorld:
    """Draw a synthetic world and its census observations.

    Raises:
        SynthError: when no draw satisfies positivity and migration balance
            within ``max_retries`` attempts.
    """
    cfg = config or WorldConfig()
    grid = cfg.make_grid()
    A, T, C = grid.n_age, grid.n_time, grid.n_county
    rng = np.random.default_rng(cfg.seed)

    schedule_years = schedule_years_for(grid.time_points[0])
    logit_q = wpp_mortality_stand_in(grid.age_groups, schedule_years)
    basis = build_basis(logit_q, grid.time_points, schedule_years)
    national_design, props = _boundary_design(cfg, grid, rng)
    sig = _draw_sigmas(cfg, rng)

    for attempt in range(cfg.max_retries):
        try:
            mort, mig, mult, boundary, eta = _draw_truth(cfg, grid, basis, national_design, props, sig, rng)
        except InvalidStateError:
            continue
        if _balanced(mig, eta.eta):
            break
    else:
        raise SynthError(f"no admissible world after {cfg.max_retries} draws")
    if attempt:
        log.info("synthetic world accepted after %d redraws", attempt)

    total = eta.eta.sum(axis=2)
    wpp = total * np.exp(rng.uniform(-cfg.wpp_perturbation, cfg.wpp_perturbation, (A, T)))
    wpp[0, :] = national_design[0, :]
    wpp[:, 0] = national_design[:, 0]
    national = NationalInputs(wpp_pop=wpp, wpp_logit_q=logit_q, wpp_years=schedule_years)

    lw, s = np.log(wpp), np.log(total)
    lam_mean, om_mean = lw + np.log(LOWER_FACTOR), lw + np.log(UPPER_FACTOR)
    upper = np.minimum(lw, s)
    lower = np.maximum(lw, s)
    lam = truncnorm.rvs(-np.inf, (upper - lam_mean) / BOUND_SD, loc=lam_mean, scale=BOUND_SD,
                        random_state=rng)
    lam = np.minimum(lam, s - 1e-9)
    omega = truncnorm.rvs((lower - om_mean) / BOUND_SD, np.inf, loc=om_mean, scale=BOUND_SD,
                          random_state=rng)
    truth = ParameterState(mort, mig, mult, boundary, sig, ConstraintBounds(lam, omega))

    populations, migration = _census_tables(cfg, grid, eta.eta, mig, rng)
    obs = build_observations(populations, migration, grid,
                             fraction_for=lambda year: cfg.sampling_fraction)
    holdout = _holdout_table(cfg, grid, eta.eta)
    return SyntheticWorld(grid, truth, eta, national, props, basis, obs, populations,
                          migration, holdout, cfg)


def _record(expected: np.ndarray, f: float, rng: np.random.Generator) -> np.ndarray:
    """Census counts for expected cell values under sampling fraction ``f``.

    Log-normal noise with variance (1 - f) / (f * count), except that cells
    expecting less than one sampled person are recorded as zero.
    """
    seen = (f * expected >= 1) | (f >= 1)
    safe = np.where(seen, expected, 1.0)
    # one draw per cell either way so the stream does not depend on which cells are seen
    noisy = safe * np.exp(rng.normal(0, np.sqrt((1 - f) / (f * safe))))
    return np.where(seen, noisy, 0.0)


def _census_tables(cfg, grid, eta, mig, rng):
    """Noisy census counts at the fitted census waves."""
    times = cfg.census_times(grid.n_time)
    county_time = times[-1] if times else None
    psi_in, psi_out = mig.flows()
    f = cfg.sampling_fraction
    pop_rows, mig_rows = [], []
    for t in times:
        year = grid.time_points[t]
        if t == county_time:
            level, regions = "county", grid.counties
            cells = [eta[:, t, :], psi_in[:, t, :], psi_out[:, t, :]]
        else:
            level, regions = "district", grid.districts
            cells = [district_sums(v[:, t, :], grid.district_of, grid.n_district)
                     for v in (eta, psi_in, psi_out)]
        if not cfg.migration:
            # placeholder flows are negligible; a census records no movers
            cells[1:] = [np.zeros_like(v) for v in cells[1:]]
        noisy = [_record(v, f, rng) if v.any() else v for v in cells]
        for a, age in enumerate(grid.age_groups):
            for r, region in enumerate(regions):
                pop_rows.append((year, level, region, age, noisy[0][a, r]))
                mig_rows.append((year, level, region, age, "in", noisy[1][a, r]))
                mig_rows.append((year, level, region, age, "out", noisy[2][a, r]))
    populations = pd.DataFrame(pop_rows, columns=["year", "region_level", "region_id", "age_start", "count"])
    migration = pd.DataFrame(mig_rows, columns=["year", "region_level", "region_id", "age_start",
                                                "direction", "count"])
    return populations, migration


def _holdout_table(cfg, grid, eta) -> pd.DataFrame:
    columns = ["year", "region_level", "region_id", "age_start", "count"]
    if not cfg.holdout:
        return pd.DataFrame(columns=columns)
    t = grid.n_time - 1
    rows = [(grid.time_points[t], "county", county, age, eta[a, t, c])
            for a, age in enumerate(grid.age_groups) for c, county in enumerate(grid.counties)]
    return pd.DataFrame(rows, columns=columns)


def truth_table(world: SyntheticWorld) -> pd.DataFrame:
    """Long table of true populations, death probabilities and flows by cell."""
    g = world.grid
    gamma = world.truth.mort.gamma(world.basis)
    psi_in, psi_out = world.truth.mig.flows()
    A, T, C = world.eta.eta.shape
    a, t, c = np.meshgrid(np.arange(A), np.arange(T), np.arange(C), indexing="ij")
    return pd.DataFrame({
        "year": np.asarray(g.time_points)[t.ravel()],
        "age_start": np.asarray(g.age_groups)[a.ravel()],
        "county_id": np.asarray(g.counties, dtype=object)[c.ravel()],
        "eta": world.eta.eta.ravel(),
        "gamma": gamma.ravel(),
        "psi_in": psi_in.ravel(),
        "psi_out": psi_out.ravel(),
    })


def write_world(world: SyntheticWorld, directory: str | Path) -> dict[str, Path]:
    """Write ingest-compatible inputs plus truth and holdout files."""
    from .posterior import pack, param_names

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    g = world.grid
    paths = {name: directory / f"{name}.csv" for name in
             ("populations", "migration", "wpp_pop", "wpp_mortality", "grid", "boundary_props",
              "holdout", "truth", "truth_params")}
    fmt = "%.17g"
    world.populations.to_csv(paths["populations"], index=False, float_format=fmt)
    world.migration.to_csv(paths["migration"], index=False, float_format=fmt)
    wpp_rows = [(year, age, world.national.wpp_pop[a, t])
                for t, year in enumerate(g.time_points) for a, age in enumerate(g.age_groups)]
    pd.DataFrame(wpp_rows, columns=["year", "age_start", "count"]).to_csv(
        paths["wpp_pop"], index=False, float_format=fmt)
    mort_rows = [(int(year), age, world.national.wpp_logit_q[n, a])
                 for n, year in enumerate(world.national.wpp_years) for a, age in enumerate(g.age_groups)]
    pd.DataFrame(mort_rows, columns=["year", "age_start", "logit_q"]).to_csv(
        paths["wpp_mortality"], index=False, float_format=fmt)
    write_grid(g, paths["grid"])
    write_boundary_props(world.props, g, paths["boundary_props"])
    world.holdout.to_csv(paths["holdout"], index=False, float_format=fmt)
    truth_table(world).to_csv(paths["truth"], index=False, float_format=fmt)
    pd.DataFrame({"param": param_names(g), "value": pack(world.truth)}).to_csv(
        paths["truth_params"], index=False, float_format=fmt)
    return paths
