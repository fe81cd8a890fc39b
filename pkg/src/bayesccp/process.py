"""Cohort-component projection and the mortality, migration and multiplier transforms.

Arrays follow the ``[age, time, county]`` axis order unless noted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .mortality_basis import LOGIT_CLIP, MortalityBasis


class InvalidStateError(ValueError):
    """A parameter combination with zero posterior density (e.g. ``1 + phi <= 0``)."""

    def __init__(self, message: str, cell: tuple | None = None):
        super().__init__(message)
        self.cell = cell


@dataclass
class MortalityParams:
    alpha0: np.ndarray  # (C,)
    delta: np.ndarray  # (T, C, 2)

    def beta(self, basis: MortalityBasis) -> np.ndarray:
        """County coefficients: national coefficients plus deviations, (T, C, 2)."""
        return basis.national_coeffs[:, None, :] + self.delta

    def logit_gamma(self, basis: MortalityBasis) -> np.ndarray:
        beta = self.beta(basis)
        y0, y1, y2 = basis.mean_schedule, basis.pc1, basis.pc2
        return (self.alpha0[None, None, :] + y0[:, None, None]
                + beta[None, :, :, 0] * y1[:, None, None]
                + beta[None, :, :, 1] * y2[:, None, None])

    def gamma(self, basis: MortalityBasis) -> np.ndarray:
        """Death probabilities (A, T, C)."""
        return expit(np.clip(self.logit_gamma(basis), -LOGIT_CLIP, LOGIT_CLIP))


@dataclass
class MigrationParams:
    total_in: np.ndarray  # (T, C)
    total_out: np.ndarray  # (T, C)
    share_in_raw: np.ndarray  # (A, C)
    share_out_raw: np.ndarray  # (A, C)

    @property
    def share_in(self) -> np.ndarray:
        return normalize_shares(self.share_in_raw)

    @property
    def share_out(self) -> np.ndarray:
        return normalize_shares(self.share_out_raw)

    def flows(self) -> tuple[np.ndarray, np.ndarray]:
        """Age-specific in- and out-migrant counts, each (A, T, C)."""
        psi_in = self.share_in[:, None, :] * self.total_in[None, :, :]
        psi_out = self.share_out[:, None, :] * self.total_out[None, :, :]
        return psi_in, psi_out


@dataclass
class MultiplierParams:
    zeta: np.ndarray  # (A-1, T, C)

    @property
    def log_eps(self) -> np.ndarray:
        return epsilon_from_zeta(self.zeta)


@dataclass
class BoundaryPopulations:
    """Populations of the first time point (all ages) and first age group (later times).

    The shared corner cell lives in ``first_time[0]``.
    """

    first_time: np.ndarray  # (A, C)
    first_age_rest: np.ndarray  # (T-1, C), times 1..T-1

    @property
    def first_age(self) -> np.ndarray:
        return np.vstack([self.first_time[:1], self.first_age_rest])

    @classmethod
    def from_arrays(cls, first_time, first_age) -> "BoundaryPopulations":
        first_time = np.asarray(first_time, dtype=float)
        first_age = np.asarray(first_age, dtype=float)
        if not np.array_equal(first_time[0], first_age[0]):
            raise ValueError("first_time[0] and first_age[0] are the same cells and must agree")
        return cls(first_time.copy(), first_age[1:].copy())


@dataclass
class PopulationArray:
    eta: np.ndarray  # (A, T, C)


def normalize_shares(raw: np.ndarray) -> np.ndarray:
    """Scale non-negative weights to sum to one over the first (age) axis."""
    raw = np.asarray(raw, dtype=float)
    return raw / raw.sum(axis=0, keepdims=True)


def difference_matrix(n: int) -> np.ndarray:
    """First-order difference matrix of shape (n - 1, n)."""
    d = np.zeros((n - 1, n))
    idx = np.arange(n - 1)
    d[idx, idx] = -1.0
    d[idx, idx + 1] = 1.0
    return d


def epsilon_from_zeta(zeta: np.ndarray) -> np.ndarray:
    """Log multipliers summing to zero over age whose first differences are ``zeta``.

    Works along axis 0, so ``zeta`` may be (A-1,) or (A-1, ...).  Equivalent
    to the minimum-norm solution ``D'(DD')^{-1} zeta``.
    """
    zeta = np.asarray(zeta, dtype=float)
    n = zeta.shape[0] + 1
    # log eps_a = sum_j (n [j < a] - (n - 1 - j)) zeta_j / n; integer weights keep
    # simple cases exact (no cancellation from demeaning a cumulative sum)
    a, j = np.ogrid[:n, :n - 1]
    weights = n * (j < a) - (n - 1 - j)
    return np.tensordot(weights.astype(float), zeta, axes=(1, 0)) / n


def net_migration_rate(params: MigrationParams, eta_prev: float, a: int, t: int, c: int) -> float:
    """Net migrants of cohort cell (a, t, c) as a proportion of ``eta_prev``."""
    if not eta_prev > 0:
        raise InvalidStateError("eta_prev must be positive", (a, t, c))
    inflow = params.total_in[t, c] * params.share_in[a, c]
    outflow = params.total_out[t, c] * params.share_out[a, c]
    return float((inflow - outflow) / eta_prev)


def ccp_step(eta_prev: float, gamma: float, phi: float, eps_log: float) -> float:
    """One cohort-component step: survive, migrate, then apply the multiplier."""
    if not eta_prev > 0:
        raise InvalidStateError(f"non-positive population {eta_prev}")
    if not 0 <= gamma < 1:
        raise InvalidStateError(f"death probability {gamma} outside [0, 1)")
    if not 1 + phi > 0:
        raise InvalidStateError(f"net migration rate {phi} empties the cohort")
    return eta_prev * (1.0 - gamma) * (1.0 + phi) * np.exp(eps_log)


def forward_populate(
    boundary: BoundaryPopulations,
    mort: MortalityParams,
    mig: MigrationParams,
    mult: MultiplierParams,
    basis: MortalityBasis,
) -> PopulationArray:
    """Fill the full (A, T, C) population array from boundary cells and components.

    Raises:
        InvalidStateError: with ``cell = (a, t, c)`` of the first cell whose
            predecessor loses more than its whole population to migration.
    """
    first_time = np.asarray(boundary.first_time, dtype=float)
    first_age = boundary.first_age
    A, C = first_time.shape
    T = first_age.shape[0]
    gamma = mort.gamma(basis)
    psi_in, psi_out = mig.flows()
    log_eps = mult.log_eps

    eta = np.empty((A, T, C))
    eta[:, 0, :] = first_time
    eta[0, :, :] = first_age
    if np.any(~(eta[:, 0, :] > 0)) or np.any(~(eta[0, :, :] > 0)):
        raise InvalidStateError("boundary populations must be positive")
    for t in range(1, T):
        prev = eta[:-1, t - 1, :]
        phi = (psi_in[:-1, t - 1, :] - psi_out[:-1, t - 1, :]) / prev
        bad = ~(1.0 + phi > 0)
        if bad.any():
            a, c = np.argwhere(bad)[0]
            raise InvalidStateError(
                f"net out-migration exceeds population at age {a + 1}, time {t}, county {c}",
                (int(a) + 1, t, int(c)),
            )
        eta[1:, t, :] = prev * (1.0 - gamma[:-1, t - 1, :]) * (1.0 + phi) * np.exp(log_eps[:-1, t - 1, :])
    return PopulationArray(eta)


def district_sums(values: np.ndarray, district_of: np.ndarray, n_district: int) -> np.ndarray:
    """Sum the last (county) axis into districts."""
    out = np.zeros(values.shape[:-1] + (n_district,))
    for d in range(n_district):
        out[..., d] = values[..., district_of == d].sum(axis=-1)
    return out
