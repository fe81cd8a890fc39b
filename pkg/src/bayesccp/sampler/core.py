"""Adaptive random-walk Metropolis-within-Gibbs over named parameter blocks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

MAX_INIT_TRIES = 100


class SamplerError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    """Chain counts, lengths and adaptation settings.

    ``block_plan`` maps block names to index arrays of the parameter vector;
    an empty plan means one block holding every parameter.  One-dimensional
    blocks adapt their step towards ``target_accept`` and larger blocks
    towards ``target_accept_block``, with the proposal covariance re-estimated
    every ``adapt_window`` warmup iterations.
    """

    n_chains: int = 4
    n_warmup: int = 1000
    n_samples: int = 1000
    thin: int = 1
    seed: int = 0
    block_plan: dict[str, Sequence[int]] = field(default_factory=dict)
    target_accept: float = 0.44
    target_accept_block: float = 0.23
    adapt_window: int = 100

    def __post_init__(self):
        if self.n_chains < 2:
            raise ValueError("need at least 2 chains for convergence diagnostics")
        if self.n_warmup < 0 or self.n_samples < 1 or self.thin < 1 or self.adapt_window < 1:
            raise ValueError("chain lengths, thinning and adapt_window must be positive")
        for name in ("target_accept", "target_accept_block"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")

    @property
    def n_kept(self) -> int:
        return self.n_samples // self.thin


@dataclass
class PosteriorDraws:
    """Post-warmup draws, shape (chain, iteration, parameter)."""

    draws: np.ndarray
    param_names: list[str]
    acceptance_rates: dict[str, np.ndarray]
    rng_seed: int

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iter(self) -> int:
        return self.draws.shape[1]

    def column(self, name: str) -> np.ndarray:
        """(chain, iteration) draws of one parameter."""
        return self.draws[:, :, self.param_names.index(name)]

    def pooled(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[2])

    def write_csv(self, directory: str | Path, prefix: str = "draws") -> list[Path]:
        """One long-format ``iteration,param,value`` file per chain."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        n_iter, n_par = self.draws.shape[1:]
        for ch in range(self.n_chains):
            frame = pd.DataFrame({
                "iteration": np.repeat(np.arange(n_iter), n_par),
                "param": np.tile(np.asarray(self.param_names, dtype=object), n_iter),
                "value": self.draws[ch].ravel(),
            })
            path = directory / f"{prefix}_chain{ch}.csv"
            frame.to_csv(path, index=False, float_format="%.17g")
            paths.append(path)
        return paths

    @classmethod
    def read_csv(cls, paths: Sequence[str | Path], rng_seed: int = 0) -> "PosteriorDraws":
        chains, names = [], None
        for path in paths:
            frame = pd.read_csv(path, float_precision="round_trip")
            if names is None:
                names = list(dict.fromkeys(frame["param"]))
            n_iter = frame["iteration"].nunique()
            chains.append(frame["value"].to_numpy(float).reshape(n_iter, len(names)))
        if not chains:
            raise SamplerError("no draw files given")
        return cls(np.stack(chains), names, {}, rng_seed)


def _blocks(config: SamplerConfig, dim: int) -> list[tuple[str, np.ndarray]]:
    if not config.block_plan:
        return [("all", np.arange(dim))]
    blocks = [(name, np.asarray(idx, dtype=int)) for name, idx in config.block_plan.items()]
    covered = np.sort(np.concatenate([b for _, b in blocks]))
    if not np.array_equal(covered, np.arange(dim)):
        raise SamplerError("block plan must cover every parameter exactly once")
    return blocks


def _initial_point(init_strategy, posterior_fn, rng):
    for _ in range(MAX_INIT_TRIES):
        x0 = np.array(init_strategy(rng), dtype=float)
        lp = posterior_fn(x0)
        if np.isfinite(lp):
            return x0, lp
    raise SamplerError(f"no finite initial state after {MAX_INIT_TRIES} attempts")


def _run_chain(config, blocks, posterior_fn, x, lp, rng):
    dim = len(x)
    n_total = config.n_warmup + config.n_samples
    kept = np.empty((config.n_kept, dim))
    log_scale = np.array([np.log(2.38 / np.sqrt(len(b))) for _, b in blocks])
    chol = [np.eye(len(b)) * 0.1 for _, b in blocks]
    targets = [config.target_accept if len(b) == 1 else config.target_accept_block
               for _, b in blocks]
    history = np.empty((max(config.n_warmup, 1), dim))
    accepted = np.zeros(len(blocks))
    k = 0
    for it in range(n_total):
        warm = it < config.n_warmup
        for bi, (_, idx) in enumerate(blocks):
            prop = x.copy()
            prop[idx] += np.exp(log_scale[bi]) * (chol[bi] @ rng.standard_normal(len(idx)))
            lp_prop = posterior_fn(prop)
            ok = np.log(rng.random()) < lp_prop - lp
            if ok:
                x, lp = prop, lp_prop
                if not np.isfinite(lp):
                    raise SamplerError("accepted a state with non-finite log-posterior")
            if warm:
                gain = min(0.5, 3.0 / (it + 1) ** 0.6)
                log_scale[bi] += gain * (float(ok) - targets[bi])
            elif ok:
                accepted[bi] += 1
        if warm:
            history[it] = x
            if (it + 1) % config.adapt_window == 0 and it + 1 >= 2 * config.adapt_window:
                recent = history[(it + 1) // 2: it + 1]
                for bi, (_, idx) in enumerate(blocks):
                    if len(idx) > 1:
                        cov = np.atleast_2d(np.cov(recent[:, idx], rowvar=False))
                        cov += 1e-10 * np.eye(len(idx))
                        chol[bi] = np.linalg.cholesky(cov)
                    else:
                        sd = recent[:, idx[0]].std()
                        chol[bi] = np.array([[max(sd, 1e-10)]])
        else:
            j = it - config.n_warmup
            if (j + 1) % config.thin == 0:
                kept[k] = x
                k += 1
    return kept, accepted / max(config.n_samples, 1)


def run_chains(config: SamplerConfig, posterior_fn: Callable[[np.ndarray], float],
               init_strategy: Callable[[np.random.Generator], np.ndarray],
               param_names: Sequence[str] | None = None) -> PosteriorDraws:
    """Sample ``posterior_fn`` with independent adaptive chains.

    Args:
        config: chain lengths, seed and block plan.
        posterior_fn: log-density of a parameter vector (``-inf`` off support).
        init_strategy: draws a starting vector from a generator; retried up
            to 100 times until ``posterior_fn`` is finite.
        param_names: optional labels; defaults to ``x0, x1, ...``.

    Returns:
        PosteriorDraws with ``n_samples // thin`` draws per chain and the
        post-warmup acceptance rate of each block.
    """
    children = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    chains, rates = [], []
    blocks = None
    for child in children:
        rng = np.random.default_rng(child)
        x, lp = _initial_point(init_strategy, posterior_fn, rng)
        if blocks is None:
            blocks = _blocks(config, len(x))
        kept, acc = _run_chain(config, blocks, posterior_fn, x, lp, rng)
        chains.append(kept)
        rates.append(acc)
    dim = chains[0].shape[1]
    names = list(param_names) if param_names is not None else [f"x{i}" for i in range(dim)]
    rates = np.array(rates)
    return PosteriorDraws(
        draws=np.stack(chains),
        param_names=names,
        acceptance_rates={name: rates[:, bi] for bi, (name, _) in enumerate(blocks)},
        rng_seed=config.seed,
    )
