"""Convergence diagnostics and posterior summaries."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata

QUANTILES = {"q2.5": 0.025, "q5": 0.05, "median": 0.5, "q95": 0.95, "q97.5": 0.975}
SUMMARY_COLUMNS = ["param", "median", "q2.5", "q97.5", "q5", "q95", "rhat", "ess"]


def _split(draws: np.ndarray) -> np.ndarray:
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2:
        raise ValueError("draws must be (chain, iteration)")
    n_chain, n_iter = draws.shape
    if n_chain < 2 or n_iter < 4:
        raise ValueError("need at least 2 chains and 4 iterations")
    half = n_iter // 2
    return np.vstack([draws[:, :half], draws[:, n_iter - half:]])


def _rhat_split(split: np.ndarray) -> float:
    m, n = split.shape
    within = split.var(axis=1, ddof=1).mean()
    if not within > 0:
        return np.nan
    between = n * split.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def rhat(draws: np.ndarray, rank_normalized: bool = False) -> float:
    """Split potential scale reduction factor.

    The classic split-R-hat is the default; ``rank_normalized=True`` returns
    the maximum of the bulk (rank-normalized) and tail (folded) versions.
    Returns ``nan`` when within-chain variance is zero (degenerate chains).
    """
    split = _split(draws)
    if not rank_normalized:
        return _rhat_split(split)
    if not split.var(axis=1, ddof=1).mean() > 0:
        return np.nan
    bulk = _rhat_split(_rank_normal(split))
    folded = np.abs(split - np.median(split))
    tail = _rhat_split(_rank_normal(folded))
    return float(np.nanmax([bulk, tail]))


def _rank_normal(x: np.ndarray) -> np.ndarray:
    ranks = rankdata(x, method="average").reshape(x.shape)
    return norm.ppf((ranks - 0.375) / (x.size + 0.25))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = len(x)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x - x.mean(), size)
    return np.fft.irfft(f * np.conj(f), size)[:n] / n


def ess(draws: np.ndarray) -> float:
    """Effective sample size with Geyer's initial monotone sequence."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 1:
        draws = draws[None, :]
    m, n = draws.shape
    if n < 4:
        return np.nan
    acov = np.array([_autocov(chain) for chain in draws])
    chain_var = acov[:, 0] * n / (n - 1)
    within = chain_var.mean()
    if not within > 0:
        return np.nan
    var_plus = within * (n - 1) / n
    if m > 1:
        var_plus += draws.mean(axis=1).var(ddof=1)
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total = 0.0
    prev_pair = np.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev_pair)
        total += pair
        prev_pair = pair
    tau = max(2.0 * total - 1.0, 1.0 / np.log10(m * n))
    return float(m * n / tau)


@dataclass
class Summary:
    """Per-parameter quantiles and convergence diagnostics."""

    table: pd.DataFrame

    def __getitem__(self, column):
        return self.table[column]

    def row(self, param: str) -> pd.Series:
        return self.table.set_index("param").loc[param]

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False, float_format="%.10g")


def summarize(draws, transform: Callable[[np.ndarray], np.ndarray] | None = None,
              names: Sequence[str] | None = None) -> Summary:
    """Pooled-chain quantiles (numpy's default linear interpolation) plus R-hat and ESS.

    Args:
        draws: a :class:`PosteriorDraws` or an array of shape
            (chain, iteration, parameter).
        transform: optional map applied to each draw vector before any
            quantile is taken.
        names: labels for the (transformed) parameters.
    """
    if hasattr(draws, "draws"):
        if names is None and transform is None:
            names = draws.param_names
        arr = draws.draws
    else:
        arr = np.asarray(draws, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.size == 0:
        raise ValueError("no draws to summarize")
    if transform is not None:
        arr = np.array([[transform(v) for v in chain] for chain in arr])
    n_chain, n_iter, n_par = arr.shape
    if names is None:
        names = [f"x{i}" for i in range(n_par)]
    pooled = arr.reshape(-1, n_par)
    q = np.quantile(pooled, list(QUANTILES.values()), axis=0)
    out = {"param": list(names)}
    for row, key in zip(q, QUANTILES):
        out[key] = row
    diagnose = n_chain >= 2 and n_iter >= 4
    out["rhat"] = [rhat(arr[:, :, i]) if diagnose else np.nan for i in range(n_par)]
    out["ess"] = [ess(arr[:, :, i]) if n_iter >= 4 else np.nan for i in range(n_par)]
    return Summary(pd.DataFrame(out)[SUMMARY_COLUMNS])
