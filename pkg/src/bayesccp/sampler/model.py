"""Fitting the cohort-component model with the compiled sweep kernel."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logit

from ..posterior import (
    LOWER_FACTOR,
    MIGRATION_BALANCE,
    UPPER_FACTOR,
    ModelData,
    ParameterState,
    layout,
    log_posterior,
    n_params,
    pack,
    param_names,
    unpack,
)
from ..process import InvalidStateError, forward_populate
from . import kernel
from .core import MAX_INIT_TRIES, PosteriorDraws, SamplerConfig, SamplerError

log = logging.getLogger(__name__)

BATCH = 200


def _interp_log(times: np.ndarray, values: np.ndarray, n_time: int) -> np.ndarray:
    """Log-linear interpolation over the grid, flat beyond the observed range."""
    return np.interp(np.arange(n_time), times, np.log(values))


def _observed_totals(data: ModelData, direction: int) -> tuple[np.ndarray, np.ndarray]:
    """Rough county migrant totals per time (nan where unobserved) and age shares."""
    A, T, C = data.dims
    g = data.grid
    weight = data.county_pop_bound
    within = np.bincount(g.district_of, weights=weight, minlength=g.n_district)
    share_in_district = weight / within[g.district_of]
    totals = np.zeros((T, C))
    seen = np.zeros((T, C), dtype=bool)
    by_age = np.full((A, C), 1e-9)
    m = data.mig_dir == direction
    for a, t, r, is_d, ly in zip(data.mig_a[m], data.mig_t[m], data.mig_region[m],
                                 data.mig_district[m], data.mig_log_y[m]):
        counties = np.flatnonzero(g.district_of == r) if is_d else np.array([r])
        for c in counties:
            value = np.exp(ly) * (share_in_district[c] if is_d else 1.0)
            totals[t, c] += value
            seen[t, c] = True
            by_age[a, c] += value
    totals[~seen] = np.nan
    return totals, by_age / by_age.sum(axis=0)


def initial_state(data: ModelData, rng: np.random.Generator, jitter: float = 1.0) -> ParameterState:
    """A data-informed starting point with random perturbations.

    Migrant totals and age shares come from the migration observations,
    boundary populations from their prior means, and the remaining
    parameters from small draws around zero.
    """
    A, T, C = data.dims
    x = np.zeros(n_params(data.dims))
    lay = layout(data.dims)

    def put(name, value):
        sl, shape = lay[name]
        x[sl] = np.broadcast_to(value, shape).ravel()

    put("alpha0", rng.normal(0, 0.05 * jitter, C))
    put("delta", rng.normal(0, 0.02 * jitter, (T, C, 2)))
    bound = data.county_pop_bound
    for direction, name in ((0, "in"), (1, "out")):
        totals, shares = _observed_totals(data, direction)
        log_tot = np.empty((T, C))
        for c in range(C):
            ok = np.isfinite(totals[:, c])
            if ok.any():
                log_tot[:, c] = _interp_log(np.flatnonzero(ok), totals[ok, c], T)
            else:
                log_tot[:, c] = np.log(0.03 * bound[c])
        log_tot = np.minimum(log_tot, np.log(0.5 * bound)[None, :])
        put(f"log_total_{name}", log_tot + rng.normal(0, 0.05 * jitter, (T, C)))
        raw = np.clip(0.9 * shares / shares.max(axis=0), 0.02, 0.98)
        put(f"logit_share_{name}", logit(raw) + rng.normal(0, 0.1 * jitter, (A, C)))
    put("zeta", rng.normal(0, 0.005 * jitter, (A - 1, T, C)))
    put("log_first_time", data.prior_first_time + rng.normal(0, 0.01 * jitter, (A, C)))
    put("log_first_age", data.prior_first_age[1:] + rng.normal(0, 0.01 * jitter, (T - 1, C)))
    put("log_sigma", np.log([0.1, 0.05, 0.1, 0.1, 0.05]) + rng.normal(0, 0.2 * jitter, 5))

    state = unpack(x, data.dims)
    eta = forward_populate(state.boundary, state.mort, state.mig, state.mult, data.basis).eta
    s = np.log(eta.sum(axis=2))
    lw = data.log_wpp
    state.bounds.lam = np.minimum(lw + np.log(LOWER_FACTOR), s - 0.01)
    state.bounds.omega = np.maximum(lw + np.log(UPPER_FACTOR), s + 0.01)
    return state


def _balanced(state: ParameterState) -> ParameterState:
    """Scale outflows so national net migration stays inside the balance band."""
    psi_in, psi_out = state.mig.flows()
    ratio = psi_in.sum(axis=2).sum() / psi_out.sum(axis=2).sum()
    state.mig.total_out = state.mig.total_out * ratio
    return state


def find_initial(data: ModelData, rng: np.random.Generator) -> ParameterState:
    for attempt in range(MAX_INIT_TRIES):
        jitter = 1.0 if attempt < MAX_INIT_TRIES // 2 else 0.2
        try:
            state = initial_state(data, rng, jitter)
        except InvalidStateError:
            continue
        if not np.isfinite(log_posterior(state, data)):
            try:
                state = _balanced(state)
                eta = forward_populate(state.boundary, state.mort, state.mig, state.mult, data.basis).eta
            except InvalidStateError:
                continue
            s = np.log(eta.sum(axis=2))
            state.bounds.lam = np.minimum(data.log_wpp + np.log(LOWER_FACTOR), s - 0.01)
            state.bounds.omega = np.maximum(data.log_wpp + np.log(UPPER_FACTOR), s + 0.01)
        if np.isfinite(log_posterior(state, data)):
            return state
    raise SamplerError(f"no finite initial state after {MAX_INIT_TRIES} attempts "
                       f"(migration balance limit {MIGRATION_BALANCE:.0%})")


def initial_log_steps(data: ModelData) -> np.ndarray:
    lay = layout(data.dims)
    steps = np.full(kernel.n_sampled(data), np.log(0.05))
    for name, value in (("alpha0", 0.05), ("delta", 0.05), ("log_total_in", 0.05),
                        ("log_total_out", 0.05), ("logit_share_in", 0.1),
                        ("logit_share_out", 0.1), ("zeta", 0.01), ("log_first_time", 0.005),
                        ("log_first_age", 0.005), ("log_sigma", 0.2), ("lam", 0.05),
                        ("omega", 0.05)):
        steps[lay[name][0]] = np.log(value)
    P = n_params(data.dims)
    steps[P:P + kernel.N_SCALE_MOVES] = np.log(0.05)
    _, size = kernel.county_blocks(data)
    steps[P + kernel.N_SCALE_MOVES:] = np.log(2.38 / np.sqrt(size))
    return steps


@dataclass
class ChainResult:
    draws: np.ndarray
    acceptance: np.ndarray
    log_steps: np.ndarray


def block_cholesky(states: np.ndarray, idx: np.ndarray, size: np.ndarray,
                   shrink: float = 0.1) -> np.ndarray:
    """Cholesky factors of shrunk empirical covariances of each block."""
    n_blocks, width = idx.shape
    chol = np.zeros((n_blocks, width, width))
    for b in range(n_blocks):
        sub = states[:, idx[b, :size[b]]]
        cov = np.atleast_2d(np.cov(sub, rowvar=False))
        diag = np.diag(np.diag(cov))
        cov = (1 - shrink) * cov + shrink * diag + 1e-12 * np.eye(size[b])
        chol[b, :size[b], :size[b]] = np.linalg.cholesky(cov)
    return chol


class _Runner:
    """Feeds batches of sweeps to the compiled kernel with per-batch seeds."""

    def __init__(self, data, x0, seed_seq, target, target_block, n_block_props):
        self.L = kernel.layout_vector(data)
        self.dat = kernel.compile_data(data)
        self.der, self.scr = kernel.allocate(data)
        self.x = np.array(x0, dtype=float)
        self.x_old = np.empty_like(self.x)
        self.log_steps = initial_log_steps(data)
        self.acc = np.zeros(len(self.log_steps), dtype=np.int64)
        self.tries = np.zeros(len(self.log_steps), dtype=np.int64)
        self.seed_seq = seed_seq
        self.target = target
        self.target_block = target_block
        self.blk_idx, self.blk_size = kernel.county_blocks(data)
        self.blk_county = np.arange(len(self.blk_size), dtype=np.int64)
        width = self.blk_idx.shape[1]
        self.blk_chol = np.zeros((len(self.blk_size), width, width))
        self.n_block_props = n_block_props
        self.blocks_on = False
        self.batch = 0

    def run(self, n_sweeps, thin=1, adapt_from=-1, out=None):
        """Run sweeps in batches; returns the stored states."""
        P = len(self.x)
        n_kept = n_sweeps // thin
        out = np.empty((n_kept, P)) if out is None else out
        per_batch = thin * max(1, BATCH // thin)
        done = stored = 0
        while done < n_sweeps:
            n = min(per_batch, n_sweeps - done)
            seed = int(np.random.SeedSequence(self.seed_seq.entropy,
                                              spawn_key=self.seed_seq.spawn_key + (self.batch,))
                       .generate_state(1, dtype=np.uint32)[0])
            status = kernel.run_sweeps(
                self.x, self.L, self.dat, self.der, self.scr, self.log_steps, self.acc, self.tries,
                n, thin, adapt_from + done if adapt_from >= 0 else -1, self.target, seed,
                out, stored, self.x_old, self.blk_idx, self.blk_size, self.blk_county,
                self.blk_chol, self.n_block_props if self.blocks_on else 0, self.target_block)
            if status < 0:
                raise SamplerError(f"sampler reached an invalid state (code {status})")
            stored += status
            done += n
            self.batch += 1
        return out[:stored]

    def set_blocks(self, states):
        self.blk_chol = block_cholesky(states, self.blk_idx, self.blk_size)
        self.blocks_on = True


def run_chain(data: ModelData, x0: np.ndarray, n_warmup: int, n_samples: int, thin: int,
              seed_seq: np.random.SeedSequence, target: float = 0.44,
              target_block: float = 0.23, n_block_props: int = 2) -> ChainResult:
    """Run one chain of the compiled sampler from packed state ``x0``.

    Warmup has three stages: scalar updates only (the second half of which
    seeds the block covariances), then block proposals with those
    covariances, whose states re-estimate the covariances for the final
    stage.  Everything is frozen after warmup.
    """
    runner = _Runner(data, x0, seed_seq, target, target_block, n_block_props)
    s1 = int(0.4 * n_warmup)
    s2 = int(0.7 * n_warmup)
    use_blocks = n_block_props > 0 and s1 // 2 >= 20
    runner.run(s1 // 2, adapt_from=0)
    states = runner.run(s1 - s1 // 2, adapt_from=s1 // 2)
    if use_blocks:
        runner.set_blocks(states)
    states = runner.run(s2 - s1, adapt_from=s1)
    if use_blocks:
        runner.set_blocks(states)
    runner.run(n_warmup - s2, adapt_from=s2)
    runner.acc[:] = 0
    runner.tries[:] = 0
    draws = runner.run(n_samples, thin=thin)
    rates = np.where(runner.tries > 0, runner.acc / np.maximum(runner.tries, 1), np.nan)
    return ChainResult(draws, rates, runner.log_steps)


def fit_model(data: ModelData, config: SamplerConfig, init_states=None) -> PosteriorDraws:
    """Sample the model posterior with ``config.n_chains`` independent chains.

    Chains run sequentially; each uses its own child of the seed sequence for
    initialization and for the compiled kernel, so results are reproducible.
    """
    children = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    chains, rates = [], []
    for i, child in enumerate(children):
        init_seq, run_seq = child.spawn(2)
        if init_states is not None:
            x0 = pack(init_states[i])
        else:
            x0 = pack(find_initial(data, np.random.default_rng(init_seq)))
        result = run_chain(data, x0, config.n_warmup, config.n_samples, config.thin, run_seq,
                           config.target_accept, config.target_accept_block)
        log.info("chain %d: median acceptance %.2f", i, np.nanmedian(result.acceptance))
        chains.append(result.draws)
        rates.append(result.acceptance)
    names = param_names(data.grid)
    rates = np.array(rates)
    P = n_params(data.dims)
    acceptance = {name: rates[:, i] for i, name in enumerate(names)}
    for m, name in enumerate(kernel.SCALE_MOVE_NAMES):
        acceptance[name] = rates[:, P + m]
    for c, county in enumerate(data.grid.counties):
        acceptance[f"block[{county}]"] = rates[:, P + kernel.N_SCALE_MOVES + c]
    return PosteriorDraws(np.stack(chains), names, acceptance, config.seed)


def kernel_log_posterior(data: ModelData, x: np.ndarray) -> float:
    """Log-posterior evaluated by the compiled kernel (for cross-checks)."""
    L = kernel.layout_vector(data)
    dat = kernel.compile_data(data)
    der, scr = kernel.allocate(data)
    return float(kernel.state_log_posterior(np.asarray(x, dtype=float), L, dat, der, scr))


DERIVED_NAMES = ("eta", "gamma", "psi_in", "psi_out", "log_eps")


def derived_draws(draws: PosteriorDraws, data: ModelData, names=DERIVED_NAMES) -> dict[str, np.ndarray]:
    """Populations and components implied by each stored draw.

    Returns arrays of shape (chain, iteration, A, T, C) keyed by name.
    """
    A, T, C = data.dims
    n_chain, n_iter, _ = draws.draws.shape
    out = {name: np.empty((n_chain, n_iter, A, T, C)) for name in names}
    for ch in range(n_chain):
        for it in range(n_iter):
            state = unpack(draws.draws[ch, it], data.dims)
            values = {}
            if "eta" in out:
                values["eta"] = forward_populate(state.boundary, state.mort, state.mig,
                                                 state.mult, data.basis).eta
            if "gamma" in out:
                values["gamma"] = state.mort.gamma(data.basis)
            if "psi_in" in out or "psi_out" in out:
                values["psi_in"], values["psi_out"] = state.mig.flows()
            if "log_eps" in out:
                values["log_eps"] = state.mult.log_eps
            for name in out:
                out[name][ch, it] = values[name]
    return out
