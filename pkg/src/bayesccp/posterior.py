"""Log-posterior of the constrained cohort-component model.

Densities are expressed with respect to the packed coordinates of
:class:`ParameterState`: positive quantities (migrant totals, boundary
populations, standard deviations) on the log scale and raw migration age
shares on the logit scale.  Priors stated on the natural scale therefore
carry their log-Jacobian.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logit
from scipy.stats import norm

from .grids import ValidatedGrid
from .ingest import BoundaryProportions, NationalInputs, ObservationSet
from .mortality_basis import MortalityBasis, build_basis
from .process import (
    BoundaryPopulations,
    InvalidStateError,
    MigrationParams,
    MortalityParams,
    MultiplierParams,
    PopulationArray,
    forward_populate,
)

SIGMA_NAMES = ("alpha", "delta", "in", "out", "zeta")
BOUNDARY_SD = 0.01
BOUND_SD = 0.1
LOWER_FACTOR = 0.9
UPPER_FACTOR = 1.1
MIGRATION_BALANCE = 0.1
SOFT_SCALE = 1e-3


@dataclass
class VarianceParams:
    sigma_alpha: float
    sigma_delta: float
    sigma_in: float
    sigma_out: float
    sigma_zeta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma_alpha, self.sigma_delta, self.sigma_in,
                         self.sigma_out, self.sigma_zeta])

    @classmethod
    def from_array(cls, values) -> "VarianceParams":
        return cls(*(float(v) for v in values))


@dataclass
class ConstraintBounds:
    """Log-scale lower (``lam``) and upper (``omega``) national bounds, (A, T)."""

    lam: np.ndarray
    omega: np.ndarray


@dataclass
class ParameterState:
    mort: MortalityParams
    mig: MigrationParams
    mult: MultiplierParams
    boundary: BoundaryPopulations
    variances: VarianceParams
    bounds: ConstraintBounds

    @property
    def dims(self) -> tuple[int, int, int]:
        A, C = self.boundary.first_time.shape
        T = self.mort.delta.shape[0]
        return A, T, C

    def to_vector(self) -> np.ndarray:
        return pack(self)

    @classmethod
    def from_vector(cls, vector, dims) -> "ParameterState":
        return unpack(vector, dims)

    def copy(self) -> "ParameterState":
        return unpack(pack(self), self.dims)


def layout(dims) -> dict[str, tuple[slice, tuple[int, ...]]]:
    """Slices and shapes of each block in the packed vector."""
    A, T, C = dims
    shapes = [
        ("alpha0", (C,)),
        ("delta", (T, C, 2)),
        ("log_total_in", (T, C)),
        ("log_total_out", (T, C)),
        ("logit_share_in", (A, C)),
        ("logit_share_out", (A, C)),
        ("zeta", (A - 1, T, C)),
        ("log_first_time", (A, C)),
        ("log_first_age", (T - 1, C)),
        ("log_sigma", (len(SIGMA_NAMES),)),
        ("lam", (A, T)),
        ("omega", (A, T)),
    ]
    out, start = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        out[name] = (slice(start, start + size), shape)
        start += size
    return out


def n_params(dims) -> int:
    return max(s.stop for s, _ in layout(dims).values())


def pack(state: ParameterState) -> np.ndarray:
    parts = {
        "alpha0": state.mort.alpha0,
        "delta": state.mort.delta,
        "log_total_in": np.log(state.mig.total_in),
        "log_total_out": np.log(state.mig.total_out),
        "logit_share_in": logit(state.mig.share_in_raw),
        "logit_share_out": logit(state.mig.share_out_raw),
        "zeta": state.mult.zeta,
        "log_first_time": np.log(state.boundary.first_time),
        "log_first_age": np.log(state.boundary.first_age_rest),
        "log_sigma": np.log(state.variances.as_array()),
        "lam": state.bounds.lam,
        "omega": state.bounds.omega,
    }
    lay = layout(state.dims)
    out = np.empty(n_params(state.dims))
    for name, (sl, shape) in lay.items():
        value = np.asarray(parts[name], dtype=float)
        if value.shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {value.shape}")
        out[sl] = value.ravel()
    return out


def unpack(vector, dims) -> ParameterState:
    vector = np.asarray(vector, dtype=float)
    lay = layout(dims)
    if vector.shape != (n_params(dims),):
        raise ValueError(f"packed vector must have length {n_params(dims)}")
    get = {name: vector[sl].reshape(shape).copy() for name, (sl, shape) in lay.items()}
    return ParameterState(
        mort=MortalityParams(get["alpha0"], get["delta"]),
        mig=MigrationParams(np.exp(get["log_total_in"]), np.exp(get["log_total_out"]),
                            expit(get["logit_share_in"]), expit(get["logit_share_out"])),
        mult=MultiplierParams(get["zeta"]),
        boundary=BoundaryPopulations(np.exp(get["log_first_time"]), np.exp(get["log_first_age"])),
        variances=VarianceParams.from_array(np.exp(get["log_sigma"])),
        bounds=ConstraintBounds(get["lam"], get["omega"]),
    )


def param_names(grid: ValidatedGrid) -> list[str]:
    """Human-readable names for every entry of the packed vector."""
    ages, years, counties = grid.age_groups, grid.time_points, grid.counties
    names = [f"alpha0[{c}]" for c in counties]
    names += [f"delta[{y},{c},{k + 1}]" for y in years for c in counties for k in range(2)]
    for direction in ("in", "out"):
        names += [f"log_total_{direction}[{y},{c}]" for y in years for c in counties]
    for direction in ("in", "out"):
        names += [f"logit_share_{direction}[{a},{c}]" for a in ages for c in counties]
    names += [f"zeta[{a},{y},{c}]" for a in ages[1:] for y in years for c in counties]
    names += [f"log_eta_first_time[{a},{c}]" for a in ages for c in counties]
    names += [f"log_eta_first_age[{y},{c}]" for y in years[1:] for c in counties]
    names += [f"log_sigma_{s}" for s in SIGMA_NAMES]
    names += [f"lambda[{a},{y}]" for a in ages for y in years]
    names += [f"omega[{a},{y}]" for a in ages for y in years]
    return names


@dataclass
class ModelData:
    """Everything the posterior needs besides the parameters, in array form."""

    grid: ValidatedGrid
    basis: MortalityBasis
    log_wpp: np.ndarray  # (A, T)
    prior_first_time: np.ndarray  # (A, C) mean of log boundary populations
    prior_first_age: np.ndarray  # (T, C)
    county_pop_bound: np.ndarray  # (C,) upper bound of the first migrant totals
    pop_a: np.ndarray
    pop_t: np.ndarray
    pop_region: np.ndarray
    pop_district: np.ndarray  # bool: observation is a district sum
    pop_log_y: np.ndarray
    pop_var: np.ndarray
    mig_a: np.ndarray
    mig_t: np.ndarray
    mig_region: np.ndarray
    mig_district: np.ndarray
    mig_dir: np.ndarray  # 0 = in, 1 = out
    mig_log_y: np.ndarray
    mig_var: np.ndarray
    soft_constraints: bool = False
    census_years: tuple[int, ...] = field(default_factory=tuple)

    @property
    def dims(self) -> tuple[int, int, int]:
        g = self.grid
        return g.n_age, g.n_time, g.n_county

    @classmethod
    def build(cls, grid: ValidatedGrid, obs: ObservationSet, national: NationalInputs,
              props: BoundaryProportions, basis: MortalityBasis | None = None,
              soft_constraints: bool = False) -> "ModelData":
        if basis is None:
            basis = build_basis(national.wpp_logit_q, grid.time_points, national.wpp_years)
        log_wpp = np.log(national.wpp_pop)
        prior_first_time = log_wpp[:, :1] + np.log(props.first_time)
        prior_first_age = log_wpp[:1, :].T + np.log(props.first_age)
        pop, mig = obs.population, obs.migration
        return cls(
            grid=grid,
            basis=basis,
            log_wpp=log_wpp,
            prior_first_time=prior_first_time,
            prior_first_age=prior_first_age,
            county_pop_bound=first_period_county_totals(obs, grid, props),
            pop_a=pop["a"].to_numpy(np.int64),
            pop_t=pop["t"].to_numpy(np.int64),
            pop_region=pop["region_idx"].to_numpy(np.int64),
            pop_district=(pop["region_level"] == "district").to_numpy(),
            pop_log_y=np.log(pop["count"].to_numpy(float)),
            pop_var=pop["sampling_var_log"].to_numpy(float),
            mig_a=mig["a"].to_numpy(np.int64),
            mig_t=mig["t"].to_numpy(np.int64),
            mig_region=mig["region_idx"].to_numpy(np.int64),
            mig_district=(mig["region_level"] == "district").to_numpy(),
            mig_dir=(mig["direction"] == "out").to_numpy(np.int64),
            mig_log_y=np.log(mig["count"].to_numpy(float)),
            mig_var=mig["sampling_var_log"].to_numpy(float),
            soft_constraints=soft_constraints,
            census_years=tuple(obs.census_years),
        )


def first_period_county_totals(obs: ObservationSet, grid: ValidatedGrid,
                               props: BoundaryProportions) -> np.ndarray:
    """Observed all-age population of each county at the first census.

    District-level totals are apportioned by the county shares of the
    county-level census, or by the first-period boundary proportions when no
    county-level census exists.
    """
    pop = obs.population
    first = min(pop["year"])
    rows = pop[pop["year"] == first]
    C, D = grid.n_county, grid.n_district
    county_tot = np.zeros(C)
    district_tot = np.zeros(D)
    county_level = rows["region_level"] == "county"
    np.add.at(county_tot, rows.loc[county_level, "region_idx"].to_numpy(int),
              rows.loc[county_level, "count"].to_numpy(float))
    np.add.at(district_tot, rows.loc[~county_level, "region_idx"].to_numpy(int),
              rows.loc[~county_level, "count"].to_numpy(float))
    county_years = obs.county_level_years()
    if county_years:
        ref = pop[(pop["year"] == county_years[-1]) & (pop["region_level"] == "county")]
        weight = np.zeros(C)
        np.add.at(weight, ref["region_idx"].to_numpy(int), ref["count"].to_numpy(float))
    else:
        weight = props.first_time.sum(axis=0)
    within = np.zeros(D)
    np.add.at(within, grid.district_of, weight)
    share = weight / within[grid.district_of]
    return county_tot + district_tot[grid.district_of] * share


def _normal(x, sd):
    return norm.logpdf(x, loc=0.0, scale=sd)


def log_prior(state: ParameterState, data: ModelData) -> float:
    """Sum of all prior log-densities (packed coordinates); ``-inf`` off support."""
    A, T, C = state.dims
    sig = state.variances
    sigmas = sig.as_array()
    if np.any(~(sigmas > 0)):
        return -np.inf
    # half-normal on each sd, plus log-Jacobian of the log transform
    total = float(np.sum(np.log(2.0) + norm.logpdf(sigmas) + np.log(sigmas)))

    total += _normal(state.mort.alpha0, sig.sigma_alpha).sum()
    delta = state.mort.delta
    total += _normal(delta[0], sig.sigma_delta).sum()
    total += _normal(np.diff(delta, axis=0), sig.sigma_delta).sum()

    bound = data.county_pop_bound
    for total_flow, sd in ((state.mig.total_in, sig.sigma_in), (state.mig.total_out, sig.sigma_out)):
        first = total_flow[0]
        if np.any(~(first > 0)) or np.any(first >= bound):
            return -np.inf
        x = np.log(total_flow)
        total += float(np.sum(np.log(first) - np.log(bound)))
        total += _normal(x[1] - x[0], sd).sum()
        if T > 2:
            total += _normal(x[2:] - 2 * x[1:-1] + x[:-2], sd).sum()

    for raw in (state.mig.share_in_raw, state.mig.share_out_raw):
        if np.any(~(raw > 0)) or np.any(~(raw < 1)):
            return -np.inf
        total += float(np.sum(np.log(raw) + np.log1p(-raw)))

    total += _normal(state.mult.zeta, sig.sigma_zeta).sum()

    b = state.boundary
    total += norm.logpdf(np.log(b.first_time), data.prior_first_time, BOUNDARY_SD).sum()
    total += norm.logpdf(np.log(b.first_age_rest), data.prior_first_age[1:], BOUNDARY_SD).sum()

    total += bounds_log_prior(state.bounds, data.log_wpp)
    return float(total)


def bounds_log_prior(bounds: ConstraintBounds, log_wpp: np.ndarray) -> float:
    """Truncated-normal priors of the national bounds."""
    lam_mean = log_wpp + np.log(LOWER_FACTOR)
    om_mean = log_wpp + np.log(UPPER_FACTOR)
    if np.any(bounds.lam > log_wpp) or np.any(bounds.omega < log_wpp):
        return -np.inf
    lam = norm.logpdf(bounds.lam, lam_mean, BOUND_SD) - norm.logcdf((log_wpp - lam_mean) / BOUND_SD)
    om = norm.logpdf(bounds.omega, om_mean, BOUND_SD) - norm.logsf((log_wpp - om_mean) / BOUND_SD)
    return float(lam.sum() + om.sum())


def populate(state: ParameterState, data: ModelData) -> PopulationArray:
    return forward_populate(state.boundary, state.mort, state.mig, state.mult, data.basis)


def _obs_loglik(values: np.ndarray, a, t, region, district, log_y, var, grid) -> float:
    if len(a) == 0:
        return 0.0
    district_values = np.zeros(values.shape[:2] + (grid.n_district,))
    np.add.at(district_values.transpose(2, 0, 1), grid.district_of, values.transpose(2, 0, 1))
    mu = np.where(district, district_values[a, t, np.where(district, region, 0)],
                  values[a, t, np.where(district, 0, region)])
    return float(norm.logpdf(log_y, np.log(mu), np.sqrt(var)).sum())


def log_likelihood(state: ParameterState, data: ModelData, eta: np.ndarray | None = None) -> float:
    """Census population and migration data models; ``-inf`` for invalid states."""
    if eta is None:
        try:
            eta = populate(state, data).eta
        except InvalidStateError:
            return -np.inf
    psi_in, psi_out = state.mig.flows()
    g = data.grid
    total = _obs_loglik(eta, data.pop_a, data.pop_t, data.pop_region, data.pop_district,
                        data.pop_log_y, data.pop_var, g)
    for direction, psi in ((0, psi_in), (1, psi_out)):
        m = data.mig_dir == direction
        total += _obs_loglik(psi, data.mig_a[m], data.mig_t[m], data.mig_region[m],
                             data.mig_district[m], data.mig_log_y[m], data.mig_var[m], g)
    return total


def constraint_log_density(state: ParameterState, data: ModelData,
                           eta: np.ndarray | None = None) -> float:
    """National band and migration-balance constraints.

    Hard mode returns 0 when every (age, time) cell satisfies
    ``lam < log sum_c eta <= omega`` and ``|sum_c psi_in - sum_c psi_out| <=
    0.1 sum_c eta``, else ``-inf``.  Soft mode replaces each indicator by a
    logistic penalty of scale 1e-3 on the log boundary.
    """
    if eta is None:
        try:
            eta = populate(state, data).eta
        except InvalidStateError:
            return -np.inf
    psi_in, psi_out = state.mig.flows()
    national = eta.sum(axis=2)
    s = np.log(national)
    net = psi_in.sum(axis=2) - psi_out.sum(axis=2)
    limit = MIGRATION_BALANCE * national
    lam, omega = state.bounds.lam, state.bounds.omega
    if data.soft_constraints:
        with np.errstate(divide="ignore"):
            log_abs = np.log(np.abs(net))
        total = (log_expit((s - lam) / SOFT_SCALE) + log_expit((omega - s) / SOFT_SCALE)
                 + log_expit((np.log(limit) - log_abs) / SOFT_SCALE))
        return float(total.sum())
    ok = (lam < s) & (s <= omega) & (-limit < net) & (net <= limit)
    return 0.0 if ok.all() else -np.inf


def log_posterior(state: ParameterState, data: ModelData) -> float:
    prior = log_prior(state, data)
    if not np.isfinite(prior):
        return -np.inf
    try:
        eta = populate(state, data).eta
    except InvalidStateError:
        return -np.inf
    con = constraint_log_density(state, data, eta)
    if not np.isfinite(con):
        return -np.inf
    return prior + log_likelihood(state, data, eta) + con


def vector_log_posterior(data: ModelData):
    """``log_posterior`` as a function of the packed vector."""
    dims = data.dims

    def fn(x):
        return log_posterior(unpack(x, dims), data)

    return fn
