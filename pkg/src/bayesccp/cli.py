"""Command-line front end: fit, project, validate, simulate, summarize, basis export.

Every subcommand reads an INI file (``--config``).  Relative paths in it
resolve against the file's directory.  ``--seed``, ``--chains`` and ``--out``
override the corresponding settings.  Exit codes: 0 success, 1 internal
error, 2 input error, 3 convergence failure under ``--strict``.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, synth
from .grids import GridError, ValidatedGrid, read_grid
from .ingest import InputConfig, InputError, load_inputs, read_wpp_mortality
from .mortality_basis import BasisError, MortalityBasis, build_basis
from .posterior import ModelData, unpack
from .sampler.core import PosteriorDraws, SamplerConfig, SamplerError
from .sampler.diagnostics import QUANTILES, summarize
from .sampler.model import derived_draws, fit_model
from .validate import ValidationError, evaluate_holdout

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_CONVERGENCE = 0, 1, 2, 3
DEFAULT_RHAT_THRESHOLD = 1.05
STAT_COLUMNS = ["median", "q2.5", "q97.5", "q5", "q95"]


class ConfigError(ValueError):
    pass


INPUT_ERRORS = (ConfigError, InputError, GridError, BasisError, ValidationError, FileNotFoundError,
                configparser.Error)


@dataclass
class RunConfig:
    """Resolved settings of one run."""

    grid_file: Path | None
    years: str
    age_start: int
    age_width: int
    n_age: int
    inputs: dict[str, Path]
    q_scale: str
    sampling_fraction: float
    census_fractions: dict[int, float]
    sampler: SamplerConfig
    soft_constraints: bool
    out: Path
    rhat_threshold: float
    holdout: Path | None
    holdout_year: int | None
    simulate: dict = field(default_factory=dict)
    text: str = ""

    def grid(self) -> ValidatedGrid:
        if self.grid_file is None:
            raise ConfigError("[grid] file is required")
        if not self.grid_file.exists():
            raise FileNotFoundError(f"input file not found: {self.grid_file}")
        return read_grid(self.grid_file, self.age_start, self.age_width, self.n_age, self.years)

    def input_config(self) -> InputConfig:
        missing = [k for k in ("populations", "migration", "wpp_pop", "wpp_mortality")
                   if k not in self.inputs]
        if missing:
            raise ConfigError(f"[inputs] is missing {missing}")
        return InputConfig(
            grid=self.grid(),
            populations=self.inputs["populations"],
            migration=self.inputs["migration"],
            wpp_pop=self.inputs["wpp_pop"],
            wpp_mortality=self.inputs["wpp_mortality"],
            q_scale=self.q_scale,
            boundary_props=self.inputs.get("boundary_props"),
            sampling_fraction=self.sampling_fraction,
            census_sampling_fraction=self.census_fractions,
        )

    def hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()


def _parse_fractions(text: str) -> dict[int, float]:
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        year, _, value = item.partition(":")
        out[int(year)] = float(value)
    return out


def load_config(path: str | Path | None, args: argparse.Namespace | None = None) -> RunConfig:
    """Read an INI run configuration and apply command-line overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    base = Path(".")
    text = ""
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        text = path.read_text()
        parser.read_string(text, source=str(path))
        base = path.parent
    sect = {name: parser[name] if parser.has_section(name) else {} for name in
            ("grid", "inputs", "sampler", "model", "output", "validate", "simulate")}

    def resolve(value):
        p = Path(value)
        return p if p.is_absolute() else base / p

    def get(section, key, default, kind=str):
        raw = sect[section].get(key)
        if raw is None or raw == "":
            return default
        try:
            if kind is bool:
                return parser.BOOLEAN_STATES[raw.lower()]
            return kind(raw)
        except (ValueError, KeyError) as err:
            raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from err

    inputs = {k: resolve(v) for k, v in sect["inputs"].items()
              if k in ("populations", "migration", "wpp_pop", "wpp_mortality", "boundary_props")}
    seed = get("sampler", "seed", 0, int)
    chains = get("sampler", "chains", 4, int)
    out = resolve(get("output", "dir", "out"))
    if args is not None:
        seed = args.seed if getattr(args, "seed", None) is not None else seed
        chains = args.chains if getattr(args, "chains", None) is not None else chains
        out = Path(args.out) if getattr(args, "out", None) is not None else out
    soft = get("model", "soft_constraints", False, bool)
    if args is not None and getattr(args, "soft_constraints", False):
        soft = True
    try:
        sampler = SamplerConfig(
            n_chains=chains,
            n_warmup=get("sampler", "warmup", 50000, int),
            n_samples=get("sampler", "samples", 20000, int),
            thin=get("sampler", "thin", 10, int),
            seed=seed,
        )
    except ValueError as err:
        raise ConfigError(f"[sampler] {err}") from err
    holdout = sect["validate"].get("holdout") if sect["validate"] else None
    text = text + f"\n# overrides seed={seed} chains={chains} soft={soft}\n"
    return RunConfig(
        grid_file=resolve(sect["grid"]["file"]) if "file" in sect["grid"] else None,
        years=get("grid", "years", "1979:2019:5"),
        age_start=get("grid", "age_start", 15, int),
        age_width=get("grid", "age_width", 5, int),
        n_age=get("grid", "n_age", 7, int),
        inputs=inputs,
        q_scale=get("inputs", "q_scale", "logit"),
        sampling_fraction=get("inputs", "sampling_fraction", 0.1, float),
        census_fractions=_parse_fractions(get("inputs", "census_fractions", "")),
        sampler=sampler,
        soft_constraints=soft,
        out=out,
        rhat_threshold=get("output", "rhat_threshold", DEFAULT_RHAT_THRESHOLD, float),
        holdout=resolve(holdout) if holdout else None,
        holdout_year=get("validate", "year", None, int),
        simulate=dict(sect["simulate"]),
        text=text,
    )


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _model_data(cfg: RunConfig):
    inputs = cfg.input_config()
    obs, national, props = load_inputs(inputs)
    data = ModelData.build(inputs.grid, obs, national, props, soft_constraints=cfg.soft_constraints)
    return data, obs


def _input_paths(cfg: RunConfig) -> dict[str, Path]:
    paths = dict(cfg.inputs)
    if cfg.grid_file is not None:
        paths["grid"] = cfg.grid_file
    return paths


# ---------------------------------------------------------------- summaries

def _quantile_frame(samples: np.ndarray, index: dict[str, np.ndarray]) -> pd.DataFrame:
    """Quantiles over the leading axis of ``samples`` (S, ...) in long format."""
    q = np.quantile(samples, list(QUANTILES.values()), axis=0)
    frame = pd.DataFrame({k: np.asarray(v).ravel() for k, v in index.items()})
    for row, key in zip(q, QUANTILES):
        frame[key] = row.ravel()
    return frame[list(index) + STAT_COLUMNS]


def _cell_index(grid: ValidatedGrid, shape) -> dict[str, np.ndarray]:
    A, T, C = shape
    a, t, c = np.meshgrid(np.arange(A), np.arange(T), np.arange(C), indexing="ij")
    return {"age": np.asarray(grid.age_groups)[a], "year": np.asarray(grid.time_points)[t],
            "county": np.asarray(grid.counties, dtype=object)[c]}


def component_draws(draws: PosteriorDraws, data: ModelData) -> dict[str, np.ndarray]:
    """Pooled (S, ...) draws of populations and every model component."""
    derived = derived_draws(draws, data)
    pooled = {k: v.reshape(-1, *v.shape[2:]) for k, v in derived.items()}
    flat = draws.pooled()
    states = [unpack(x, data.dims) for x in flat]
    pooled["total_in"] = np.array([s.mig.total_in for s in states])
    pooled["total_out"] = np.array([s.mig.total_out for s in states])
    pooled["share_in"] = np.array([s.mig.share_in for s in states])
    pooled["share_out"] = np.array([s.mig.share_out for s in states])
    pooled["delta"] = np.array([s.mort.delta for s in states])
    return pooled


def write_component_summaries(comp: dict, data: ModelData, out: Path) -> dict[str, Path]:
    """Posterior summaries of populations, mortality, migration and multipliers."""
    grid = data.grid
    A, T, C = data.dims
    cells = _cell_index(grid, (A, T, C))
    paths = {}
    frames = []
    for name in ("eta", "gamma", "psi_in", "psi_out", "log_eps"):
        frame = _quantile_frame(comp[name], cells)
        frame.insert(0, "quantity", name)
        frames.append(frame)
    paths["components"] = out / "summary_components.csv"
    pd.concat(frames).to_csv(paths["components"], index=False, float_format="%.10g")
    return paths


def write_plot_data(comp: dict, data: ModelData, out: Path) -> dict[str, Path]:
    """One CSV per figure: basis, population by province and by county,
    mortality, migration totals and age shares, multipliers and mortality
    deviations."""
    grid = data.grid
    A, T, C = data.dims
    years = np.asarray(grid.time_points)
    ages = np.asarray(grid.age_groups)
    counties = np.asarray(grid.counties, dtype=object)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    basis = data.basis
    paths["mortality_basis"] = out / "plot_mortality_basis.csv"
    pd.DataFrame({"age": ages, "mean": basis.mean_schedule, "pc1": basis.pc1,
                  "pc2": basis.pc2}).to_csv(paths["mortality_basis"], index=False,
                                            float_format="%.10g")

    eta = comp["eta"]
    provinces = [grid.county_to_province.get(c, grid.county_to_district[c]) for c in grid.counties]
    names = list(dict.fromkeys(provinces))
    member = np.array([[p == name for p in provinces] for name in names], dtype=float)  # (P, C)
    prov = np.einsum("satc,pc->stp", eta, member)
    t, p = np.meshgrid(np.arange(T), np.arange(len(names)), indexing="ij")
    paths["population_province"] = out / "plot_population_province.csv"
    _quantile_frame(prov, {"province": np.asarray(names, dtype=object)[p], "year": years[t]}).to_csv(
        paths["population_province"], index=False, float_format="%.10g")

    cells = _cell_index(grid, (A, T, C))
    for key, name in (("population_age_year", "eta"), ("mortality", "gamma"),
                      ("multipliers", "log_eps")):
        paths[key] = out / f"plot_{key}.csv"
        _quantile_frame(comp[name], cells).to_csv(paths[key], index=False, float_format="%.10g")

    t, c = np.meshgrid(np.arange(T), np.arange(C), indexing="ij")
    frames = []
    for direction in ("in", "out"):
        f = _quantile_frame(comp[f"total_{direction}"], {"year": years[t], "county": counties[c]})
        f.insert(0, "direction", direction)
        frames.append(f)
    paths["migration_totals"] = out / "plot_migration_totals.csv"
    pd.concat(frames).to_csv(paths["migration_totals"], index=False, float_format="%.10g")

    a, c = np.meshgrid(np.arange(A), np.arange(C), indexing="ij")
    frames = []
    for direction in ("in", "out"):
        f = _quantile_frame(comp[f"share_{direction}"], {"age": ages[a], "county": counties[c]})
        f.insert(0, "direction", direction)
        frames.append(f)
    paths["migration_age"] = out / "plot_migration_age.csv"
    pd.concat(frames).to_csv(paths["migration_age"], index=False, float_format="%.10g")

    t, c, k = np.meshgrid(np.arange(T), np.arange(C), np.arange(2), indexing="ij")
    paths["mortality_deviations"] = out / "plot_mortality_deviations.csv"
    _quantile_frame(comp["delta"], {"year": years[t], "county": counties[c],
                                    "component": k + 1}).to_csv(
        paths["mortality_deviations"], index=False, float_format="%.10g")
    return paths


def eta_rhat_max(draws: PosteriorDraws, data: ModelData) -> float:
    from .sampler.diagnostics import rhat

    eta = derived_draws(draws, data, ("eta",))["eta"]
    flat = eta.reshape(eta.shape[0], eta.shape[1], -1)
    values = [rhat(flat[:, :, i]) for i in range(flat.shape[2])]
    return float(np.nanmax(values)) if np.isfinite(values).any() else float("nan")


def _acceptance_table(draws: PosteriorDraws) -> pd.DataFrame:
    rates = draws.acceptance_rates
    rows = [(name, *np.asarray(v, dtype=float)) for name, v in rates.items()]
    cols = ["param"] + [f"chain{i}" for i in range(draws.n_chains)]
    return pd.DataFrame(rows, columns=cols)


def _family(name: str) -> str:
    return name.split("[")[0]


def _acceptance_summary(draws: PosteriorDraws) -> dict[str, float]:
    # exact Gibbs updates carry no acceptance rate and are left out
    fams: dict[str, list] = {}
    for name, v in draws.acceptance_rates.items():
        v = np.asarray(v, dtype=float).ravel()
        if np.isfinite(v).any():
            fams.setdefault(_family(name), []).extend(v[np.isfinite(v)])
    return {k: float(np.median(v)) for k, v in fams.items()}


def write_manifest(path: Path, command: str, cfg: RunConfig, extra: dict) -> None:
    inputs = {k: file_hash(p) for k, p in sorted(_input_paths(cfg).items()) if Path(p).exists()}
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.sampler.seed,
        "chains": cfg.sampler.n_chains,
        "warmup": cfg.sampler.n_warmup,
        "samples": cfg.sampler.n_samples,
        "thin": cfg.sampler.thin,
        "config_hash": cfg.hash(),
        "input_hashes": inputs,
        "constraint_mode": "soft" if cfg.soft_constraints else "hard",
    }
    manifest.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_draws(out: Path, seed: int) -> PosteriorDraws:
    paths = sorted(out.glob("draws_chain*.csv"), key=lambda p: int(p.stem.split("chain")[1]))
    if not paths:
        raise ValidationError(f"no draw files (draws_chain*.csv) in {out}; run fit first")
    return PosteriorDraws.read_csv(paths, seed)


# ---------------------------------------------------------------- commands

def cmd_fit(cfg: RunConfig, strict: bool = False) -> int:
    data, _ = _model_data(cfg)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    draws = fit_model(data, cfg.sampler)
    draws.write_csv(out)
    summarize(draws).to_csv(out / "summary_params.csv")
    _acceptance_table(draws).to_csv(out / "acceptance.csv", index=False, float_format="%.6g")
    comp = component_draws(draws, data)
    write_component_summaries(comp, data, out)
    write_plot_data(comp, data, out)
    rhat_max = eta_rhat_max(draws, data)
    write_manifest(out / "manifest.json", "fit", cfg, {
        "acceptance_rates": _acceptance_summary(draws),
        "rhat_max_eta": rhat_max,
        "rhat_threshold": cfg.rhat_threshold,
    })
    print(f"R-hat max over populations: {rhat_max:.4f}")
    if strict and not rhat_max < cfg.rhat_threshold:
        print(f"convergence failure: R-hat {rhat_max:.4f} >= {cfg.rhat_threshold}", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_project(cfg: RunConfig) -> int:
    """Summarize populations at model years after the last census."""
    data, obs = _model_data(cfg)
    draws = _read_draws(cfg.out, cfg.sampler.seed)
    last = max(obs.census_years)
    future = [t for t, yr in enumerate(data.grid.time_points) if yr > last]
    if not future:
        raise ValidationError(f"no model years after the last census {last}")
    eta = derived_draws(draws, data, ("eta",))["eta"]
    eta = eta.reshape(-1, *eta.shape[2:])[:, :, future, :]
    grid = data.grid
    A, _, C = data.dims
    a, t, c = np.meshgrid(np.arange(A), np.arange(len(future)), np.arange(C), indexing="ij")
    frame = _quantile_frame(eta, {"age": np.asarray(grid.age_groups)[a],
                                  "year": np.asarray(grid.time_points)[future][t],
                                  "county": np.asarray(grid.counties, dtype=object)[c]})
    frame.to_csv(cfg.out / "projection.csv", index=False, float_format="%.10g")
    return EXIT_OK


def cmd_validate(cfg: RunConfig, holdout_year: int | None = None) -> int:
    year = holdout_year if holdout_year is not None else cfg.holdout_year
    if cfg.holdout is None:
        raise ConfigError("[validate] holdout is required")
    if year is None:
        raise ConfigError("holdout year missing: set [validate] year or pass --year")
    if not cfg.holdout.exists():
        raise FileNotFoundError(f"input file not found: {cfg.holdout}")
    holdout = pd.read_csv(cfg.holdout, dtype={"region_id": str}, float_precision="round_trip")
    if holdout.empty:
        raise ValidationError(f"holdout file {cfg.holdout} has no rows")
    data, obs = _model_data(cfg)
    last = max(obs.census_years)
    if year <= last:
        raise ValidationError(f"holdout year {year} is inside the fitting window (last census {last})")
    if year not in data.grid.time_points:
        raise ValidationError(f"holdout year {year} is not a model time point")
    draws = _read_draws(cfg.out, cfg.sampler.seed)
    t = data.grid.time_index(year)
    eta = derived_draws(draws, data, ("eta",))["eta"][:, :, :, t, :]
    report = evaluate_holdout(eta.reshape(-1, *eta.shape[2:]), holdout, obs.population,
                              data.grid, year)
    paths = report.write(cfg.out)
    print(report.table1_wide.to_string(index=False))
    write_manifest(cfg.out / "manifest_validate.json", "validate", cfg,
                   {"holdout_year": year, "holdout_hash": file_hash(cfg.holdout),
                    "outputs": sorted(p.name for p in paths.values())})
    return EXIT_OK


SIM_INT = ("n_age", "n_time", "n_county", "n_district", "age_start", "age_width", "start_year",
           "census_every", "seed", "metro_county", "max_retries")
SIM_FLOAT = ("sampling_fraction", "base_population", "entry_growth", "entry_growth_sd",
             "cohort_sd", "metro_factor", "wpp_perturbation")
SIM_BOOL = ("holdout", "migration")


def world_config(settings: dict, seed: int | None = None) -> synth.WorldConfig:
    """WorldConfig from ``[simulate]`` settings (``sigma_<name>`` overrides the sigmas)."""
    kwargs, sigmas = {}, dict(synth.DEFAULT_SIGMAS)
    try:
        for key, raw in settings.items():
            if key in SIM_INT:
                kwargs[key] = int(raw)
            elif key in SIM_FLOAT:
                kwargs[key] = float(raw)
            elif key in SIM_BOOL:
                kwargs[key] = configparser.ConfigParser.BOOLEAN_STATES[raw.lower()]
            elif key == "migration_rate":
                kwargs[key] = tuple(float(v) for v in raw.split(","))
            elif key.startswith("sigma_") and key[6:] in sigmas:
                sigmas[key[6:]] = None if raw.lower() == "prior" else float(raw)
            else:
                raise ConfigError(f"[simulate] unknown setting {key!r}")
    except (ValueError, KeyError) as err:
        raise ConfigError(f"[simulate] cannot parse settings: {err}") from err
    if seed is not None:
        kwargs["seed"] = seed
    return synth.WorldConfig(sigmas=sigmas, **kwargs)


def fit_config_text(world: synth.SyntheticWorld, sampler: SamplerConfig) -> str:
    """An INI file that fits and validates a written synthetic world in place."""
    g = world.grid
    step = g.time_points[1] - g.time_points[0] if g.n_time > 1 else 5
    lines = [
        "[grid]", "file = grid.csv",
        f"years = {g.time_points[0]}:{g.time_points[-1]}:{step}",
        f"age_start = {g.age_groups[0]}", f"age_width = {g.age_width}", f"n_age = {g.n_age}", "",
        "[inputs]", "populations = populations.csv", "migration = migration.csv",
        "wpp_pop = wpp_pop.csv", "wpp_mortality = wpp_mortality.csv",
        "boundary_props = boundary_props.csv",
        f"sampling_fraction = {world.config.sampling_fraction}", "",
        "[sampler]", f"chains = {sampler.n_chains}", f"warmup = {sampler.n_warmup}",
        f"samples = {sampler.n_samples}", f"thin = {sampler.thin}", f"seed = {sampler.seed}", "",
        "[output]", "dir = out", "",
    ]
    if world.config.holdout:
        lines += ["[validate]", "holdout = holdout.csv", f"year = {world.holdout_year}", ""]
    return "\n".join(lines)


def cmd_simulate(cfg: RunConfig, seed: int | None = None) -> int:
    try:
        wcfg = world_config(cfg.simulate, seed)
        world = synth.generate(wcfg)
    except synth.SynthError as err:
        raise ConfigError(str(err)) from err
    paths = synth.write_world(world, cfg.out)
    (cfg.out / "config.ini").write_text(fit_config_text(world, cfg.sampler))
    print(f"wrote {len(paths)} files for a {world.grid.n_county}-county world to {cfg.out}")
    return EXIT_OK


def cmd_summarize(cfg: RunConfig) -> int:
    draws = _read_draws(cfg.out, cfg.sampler.seed)
    summary = summarize(draws)
    summary.to_csv(cfg.out / "summary_params.csv")
    table = summary.table
    print(f"{len(table)} parameters; max R-hat {np.nanmax(table['rhat']):.4f}; "
          f"min ESS {np.nanmin(table['ess']):.0f}")
    return EXIT_OK


def basis_from_config(cfg: RunConfig) -> MortalityBasis:
    grid = cfg.grid()
    if "wpp_mortality" not in cfg.inputs:
        raise ConfigError("[inputs] wpp_mortality is required")
    logit_q, years = read_wpp_mortality(cfg.inputs["wpp_mortality"], grid, cfg.q_scale)
    return build_basis(logit_q, grid.time_points, years)


def cmd_basis_export(cfg: RunConfig) -> int:
    grid = cfg.grid()
    basis = basis_from_config(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"age_start": grid.age_groups, "Y0": basis.mean_schedule, "Y1": basis.pc1,
                  "Y2": basis.pc2}).to_csv(cfg.out / "basis_schedules.csv", index=False,
                                           float_format="%.17g")
    pd.DataFrame({"year": grid.time_points, "B1": basis.national_coeffs[:, 0],
                  "B2": basis.national_coeffs[:, 1]}).to_csv(cfg.out / "basis_coefficients.csv",
                                                             index=False, float_format="%.17g")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesccp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="INI run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--chains", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--soft-constraints", action="store_true",
                        help="replace the hard national constraints by smooth penalties")
    sub = parser.add_subparsers(dest="command", required=True)
    fit = sub.add_parser("fit", parents=[common], help="sample the posterior")
    fit.add_argument("--strict", action="store_true",
                     help="exit with code 3 when population R-hat exceeds the threshold")
    sub.add_parser("project", parents=[common], help="summarize post-census populations")
    val = sub.add_parser("validate", parents=[common], help="evaluate against held-out counts")
    val.add_argument("--year", type=int, help="held-out year")
    sub.add_parser("simulate", parents=[common], help="write a synthetic world")
    sub.add_parser("summarize", parents=[common], help="summarize stored draws")
    basis = sub.add_parser("basis", help="mortality basis tools")
    basis_sub = basis.add_subparsers(dest="basis_command", required=True)
    basis_sub.add_parser("export", parents=[common], help="write basis schedules and coefficients")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args)
        if args.command == "fit":
            return cmd_fit(cfg, strict=args.strict)
        if args.command == "project":
            return cmd_project(cfg)
        if args.command == "validate":
            return cmd_validate(cfg, args.year)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.seed)
        if args.command == "summarize":
            return cmd_summarize(cfg)
        return cmd_basis_export(cfg)
    except INPUT_ERRORS as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except SamplerError as err:
        print(f"sampler error: {err}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as err:  # noqa: BLE001 - top-level guard maps to exit code 1
        log.exception("internal error")
        print(f"internal error: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
