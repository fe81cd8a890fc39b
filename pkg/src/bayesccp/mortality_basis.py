"""Principal-component mortality basis from national logit 5q_x schedules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

LOGIT_CLIP = 700.0


class BasisError(ValueError):
    pass


@dataclass(frozen=True)
class MortalityBasis:
    """Mean schedule, two principal age patterns and national coefficients.

    ``national_coeffs[t, k]`` is the projection of the (centered) national
    schedule matched to model year ``t`` onto component ``k``.
    ``sign_flips[k]`` records whether component ``k`` was negated to make
    its entries sum to a non-negative value.
    """

    mean_schedule: np.ndarray
    pc1: np.ndarray
    pc2: np.ndarray
    national_coeffs: np.ndarray
    singular_values: np.ndarray
    sign_flips: tuple[bool, bool]
    matched_years: np.ndarray

    @property
    def components(self) -> np.ndarray:
        """(A, 2) matrix whose columns are the two components."""
        return np.column_stack([self.pc1, self.pc2])


def principal_components(centered: np.ndarray, k: int = 2, rtol: float = 1e-12):
    """Top-``k`` right singular vectors of a centered matrix, sign-normalized.

    Returns ``(V, coeffs, singular_values, flips)`` with ``V`` of shape (A, k),
    ``coeffs = centered @ V``.  Each column of ``V`` is negated if needed so
    that its entries sum to a non-negative number.
    """
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if len(s) < k or s[0] == 0 or s[k - 1] <= rtol * max(s[0], 1.0) * max(centered.shape):
        raise BasisError(f"rank < {k} after centering (degenerate input)")
    v = vt[:k].T.copy()
    flips = []
    for j in range(k):
        flip = bool(v[:, j].sum() < 0)
        if flip:
            v[:, j] = -v[:, j]
        flips.append(flip)
    return v, centered @ v, s, tuple(flips)


def match_years(model_years, schedule_years) -> np.ndarray:
    """Row index of the nearest schedule year for each model year (ties go earlier)."""
    schedule_years = np.asarray(schedule_years)
    return np.array([int(np.argmin(np.abs(schedule_years - y))) for y in model_years])


def build_basis(wpp_logit_q: np.ndarray, model_years, schedule_years=None) -> MortalityBasis:
    """SVD basis of national logit mortality schedules.

    Args:
        wpp_logit_q: (N, A) logit death probabilities, one row per year.
        model_years: calendar years of the model time points.
        schedule_years: year of each row; defaults to ``model_years`` when
            the rows already line up with the model grid.
    """
    x = np.asarray(wpp_logit_q, dtype=float)
    if x.ndim != 2:
        raise BasisError("schedule matrix must be 2-D")
    n, a = x.shape
    if n < 3:
        raise BasisError(f"need at least 3 schedules, got {n}")
    if a < 2:
        raise BasisError("need at least 2 age groups")
    if not np.isfinite(x).all():
        raise BasisError("missing or non-finite schedule cells")
    if schedule_years is None:
        schedule_years = model_years
    mean = x.mean(axis=0)
    centered = x - mean
    v, coeffs, s, flips = principal_components(centered)
    rows = match_years(model_years, schedule_years)
    return MortalityBasis(
        mean_schedule=mean,
        pc1=v[:, 0].copy(),
        pc2=v[:, 1].copy(),
        national_coeffs=coeffs[rows],
        singular_values=s,
        sign_flips=flips,
        matched_years=np.asarray(schedule_years)[rows],
    )


def logit_schedule(basis: MortalityBasis, b1, b2, alpha0=0.0) -> np.ndarray:
    """Logit death probabilities; broadcasts over leading axes of ``b1``/``b2``/``alpha0``."""
    b1 = np.asarray(b1, dtype=float)[..., None]
    b2 = np.asarray(b2, dtype=float)[..., None]
    alpha0 = np.asarray(alpha0, dtype=float)[..., None]
    return alpha0 + basis.mean_schedule + b1 * basis.pc1 + b2 * basis.pc2


def reconstruct_schedule(basis: MortalityBasis, b1, b2, alpha0=0.0) -> np.ndarray:
    """Death probabilities ``expit(alpha0 + Y0 + b1*Y1 + b2*Y2)`` by age."""
    z = np.clip(logit_schedule(basis, b1, b2, alpha0), -LOGIT_CLIP, LOGIT_CLIP)
    return expit(z)


def projection_residuals(wpp_logit_q: np.ndarray, basis: MortalityBasis, schedule_years=None):
    """Per-row L2 residuals after mean-only and after mean + 2 components."""
    x = np.asarray(wpp_logit_q, dtype=float)
    centered = x - basis.mean_schedule
    coeffs = centered @ basis.components
    full = centered - coeffs @ basis.components.T
    return np.linalg.norm(centered, axis=1), np.linalg.norm(full, axis=1)
