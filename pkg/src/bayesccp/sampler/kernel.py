"""Compiled Metropolis-within-Gibbs sweeps for the cohort-component posterior.

The chain state is the packed parameter vector of :mod:`bayesccp.posterior`.
Derived arrays (survival, flows, multipliers, populations, national sums and
per-observation log-likelihood terms) are cached and refreshed per county, so
a scalar update only recomputes the cohorts it can reach.
"""
from __future__ import annotations

import math
from collections import namedtuple

import numpy as np
from numba import njit

from ..posterior import (
    BOUND_SD,
    BOUNDARY_SD,
    LOWER_FACTOR,
    MIGRATION_BALANCE,
    SIGMA_NAMES,
    SOFT_SCALE,
    UPPER_FACTOR,
    ModelData,
    layout,
    n_params,
)

# positions in the integer layout vector
A_, T_, C_, D_ = 0, 1, 2, 3
O_ALPHA, O_DELTA, O_LPIN, O_LPOUT, O_LSIN, O_LSOUT = 4, 5, 6, 7, 8, 9
O_ZETA, O_BFT, O_BFA, O_SIG, O_LAM, O_OM, SOFT = 10, 11, 12, 13, 14, 15, 16

# parameter families
F_ALPHA, F_DELTA, F_PIN, F_POUT, F_SIN, F_SOUT, F_ZETA, F_BFT, F_BFA = range(9)
# global scale moves appended after the packed parameters
N_SCALE_MOVES = 3

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)
SQRT2 = math.sqrt(2.0)

Data = namedtuple("Data", [
    "y0", "y1", "y2", "bnat", "log_wpp", "prior_ft", "prior_fa", "ybound",
    "district_of", "dist_ptr", "dist_members",
    "pa", "pt", "preg", "pdist", "plogy", "pconst", "pprec", "pop_ptr", "pop_idx",
    "ma", "mt", "mreg", "mdist", "mdir", "mlogy", "mconst", "mprec", "mig_ptr", "mig_idx",
])
Derived = namedtuple("Derived", [
    "surv", "psin", "psout", "eps", "eta", "nat", "net", "pll", "mll", "elam", "eom",
])
Scratch = namedtuple("Scratch", [
    "surv", "psin", "psout", "eps", "eta", "nat", "net", "pll", "mll", "shares",
])


def layout_vector(data: ModelData) -> np.ndarray:
    A, T, C = data.dims
    lay = layout(data.dims)
    names = ["alpha0", "delta", "log_total_in", "log_total_out", "logit_share_in",
             "logit_share_out", "zeta", "log_first_time", "log_first_age", "log_sigma",
             "lam", "omega"]
    offsets = [lay[n][0].start for n in names]
    return np.array([A, T, C, data.grid.n_district] + offsets + [int(data.soft_constraints)],
                    dtype=np.int64)


def _csr(groups: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    ptr = np.zeros(len(groups) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(g) for g in groups])
    idx = np.array([i for g in groups for i in g], dtype=np.int64)
    return ptr, idx


def _affected(region, is_district, t, grid) -> tuple[np.ndarray, np.ndarray]:
    """Observations each county can influence, sorted by time."""
    groups = []
    for c in range(grid.n_county):
        d = grid.district_of[c]
        hit = np.flatnonzero((~is_district & (region == c)) | (is_district & (region == d)))
        groups.append(list(hit[np.argsort(t[hit], kind="stable")]))
    return _csr(groups)


def compile_data(data: ModelData) -> Data:
    g = data.grid
    members = [list(np.flatnonzero(g.district_of == d)) for d in range(g.n_district)]
    dist_ptr, dist_members = _csr(members)
    pop_ptr, pop_idx = _affected(data.pop_region, data.pop_district, data.pop_t, g)
    mig_ptr, mig_idx = _affected(data.mig_region, data.mig_district, data.mig_t, g)
    return Data(
        y0=data.basis.mean_schedule.astype(float),
        y1=data.basis.pc1.astype(float),
        y2=data.basis.pc2.astype(float),
        bnat=np.ascontiguousarray(data.basis.national_coeffs, dtype=float),
        log_wpp=np.ascontiguousarray(data.log_wpp, dtype=float),
        prior_ft=np.ascontiguousarray(data.prior_first_time, dtype=float),
        prior_fa=np.ascontiguousarray(data.prior_first_age, dtype=float),
        ybound=data.county_pop_bound.astype(float),
        district_of=g.district_of.astype(np.int64),
        dist_ptr=dist_ptr,
        dist_members=dist_members,
        pa=data.pop_a, pt=data.pop_t, preg=data.pop_region,
        pdist=data.pop_district.astype(np.int64), plogy=data.pop_log_y,
        pconst=-0.5 * (LOG_2PI + np.log(data.pop_var)), pprec=1.0 / data.pop_var,
        pop_ptr=pop_ptr, pop_idx=pop_idx,
        ma=data.mig_a, mt=data.mig_t, mreg=data.mig_region,
        mdist=data.mig_district.astype(np.int64), mdir=data.mig_dir.astype(np.int64),
        mlogy=data.mig_log_y,
        mconst=-0.5 * (LOG_2PI + np.log(data.mig_var)), mprec=1.0 / data.mig_var,
        mig_ptr=mig_ptr, mig_idx=mig_idx,
    )


def allocate(data: ModelData) -> tuple[Derived, Scratch]:
    A, T, C = data.dims
    cube = (A, T, C)
    der = Derived(np.zeros(cube), np.zeros(cube), np.zeros(cube), np.zeros(cube),
                  np.zeros(cube), np.zeros((A, T)), np.zeros((A, T)),
                  np.zeros(len(data.pop_a)), np.zeros(len(data.mig_a)),
                  np.zeros((A, T)), np.zeros((A, T)))
    n_p = max(1, len(data.pop_a))
    n_m = max(1, len(data.mig_a))
    scr = Scratch(np.zeros((A, T)), np.zeros((A, T)), np.zeros((A, T)), np.zeros((A, T)),
                  np.zeros((A, T)), np.zeros((A, T)), np.zeros((A, T)),
                  np.zeros(n_p), np.zeros(n_m), np.zeros(A))
    return der, scr


# ---------------------------------------------------------------- scalar helpers

@njit(cache=True)
def _expit(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True)
def _log_expit(z):
    if z >= 0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


@njit(cache=True)
def _norm_cdf(z):
    return 0.5 * math.erfc(-z / SQRT2)


@njit(cache=True)
def _norm_ppf(p):
    """Inverse standard normal CDF (rational approximation plus one Halley step)."""
    if p <= 0.0:
        return -np.inf
    if p >= 1.0:
        return np.inf
    plow = 0.02425
    if p < plow:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((-7.784894002430293e-03 * q - 3.223964580411365e-01) * q - 2.400758277161838e+00) * q
                - 2.549732539343734e+00) * q + 4.374664141464968e+00) * q + 2.938163982698783e+00)
             / ((((7.784695709041462e-03 * q + 3.224671290700398e-01) * q + 2.445134137142996e+00) * q
                 + 3.754408661907416e+00) * q + 1.0))
    elif p <= 1.0 - plow:
        q = p - 0.5
        r = q * q
        x = ((((((-3.969683028665376e+01 * r + 2.209460984245205e+02) * r - 2.759285104469687e+02) * r
                + 1.383577518672690e+02) * r - 3.066479806614716e+01) * r + 2.506628277459239e+00) * q
             / (((((-5.447609879822406e+01 * r + 1.615858368580409e+02) * r - 1.556989798598866e+02) * r
                  + 6.680131188771972e+01) * r - 1.328068155288572e+01) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -((((((-7.784894002430293e-03 * q - 3.223964580411365e-01) * q - 2.400758277161838e+00) * q
                 - 2.549732539343734e+00) * q + 4.374664141464968e+00) * q + 2.938163982698783e+00)
              / ((((7.784695709041462e-03 * q + 3.224671290700398e-01) * q + 2.445134137142996e+00) * q
                  + 3.754408661907416e+00) * q + 1.0))
    e = _norm_cdf(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


@njit(cache=True)
def _truncnorm_upper(mean, sd, upper):
    """Draw from N(mean, sd^2) restricted to (-inf, upper]."""
    pu = _norm_cdf((upper - mean) / sd)
    u = np.random.random()
    z = _norm_ppf(u * pu)
    return min(mean + sd * z, upper)


@njit(cache=True)
def _truncnorm_lower(mean, sd, lower):
    """Draw from N(mean, sd^2) restricted to [lower, inf)."""
    pl = _norm_cdf(-(lower - mean) / sd)
    u = np.random.random()
    z = -_norm_ppf(u * pl)
    return max(mean + sd * z, lower)


@njit(cache=True)
def _lnorm(x, sd):
    return -0.5 * (x / sd) ** 2 - math.log(sd) - 0.5 * LOG_2PI


# ---------------------------------------------------------------- derived arrays

@njit(cache=True)
def _fill_surv(x, L, dat, der, c, t0, t1):
    A, C = L[A_], L[C_]
    alpha = x[L[O_ALPHA] + c]
    for t in range(t0, t1):
        b1 = dat.bnat[t, 0] + x[L[O_DELTA] + (t * C + c) * 2]
        b2 = dat.bnat[t, 1] + x[L[O_DELTA] + (t * C + c) * 2 + 1]
        for a in range(A):
            z = alpha + dat.y0[a] + b1 * dat.y1[a] + b2 * dat.y2[a]
            z = min(max(z, -700.0), 700.0)
            der.surv[a, t, c] = _expit(-z)


@njit(cache=True)
def _fill_flows(x, L, der, c, direction, shares):
    A, T, C = L[A_], L[T_], L[C_]
    o_tot = L[O_LPIN] if direction == 0 else L[O_LPOUT]
    o_sh = L[O_LSIN] if direction == 0 else L[O_LSOUT]
    psi = der.psin if direction == 0 else der.psout
    total = 0.0
    for a in range(A):
        shares[a] = _expit(x[o_sh + a * C + c])
        total += shares[a]
    for t in range(T):
        flow = math.exp(x[o_tot + t * C + c]) / total
        for a in range(A):
            psi[a, t, c] = shares[a] * flow


@njit(cache=True)
def _fill_eps(x, L, der, c, t):
    A, T, C = L[A_], L[T_], L[C_]
    level = 0.0
    mean = 0.0
    der.eps[0, t, c] = 0.0
    for a in range(1, A):
        level += x[L[O_ZETA] + ((a - 1) * T + t) * C + c]
        der.eps[a, t, c] = level
        mean += level
    mean /= A
    for a in range(A):
        der.eps[a, t, c] = math.exp(der.eps[a, t, c] - mean)


@njit(cache=True)
def _fill_boundary(x, L, der, c):
    A, T, C = L[A_], L[T_], L[C_]
    for a in range(A):
        der.eta[a, 0, c] = math.exp(x[L[O_BFT] + a * C + c])
    for t in range(1, T):
        der.eta[0, t, c] = math.exp(x[L[O_BFA] + (t - 1) * C + c])


@njit(cache=True)
def _forward(L, der, c, t_from):
    """Project county ``c`` from ``t_from``; False if a cohort is emptied."""
    A, T = L[A_], L[T_]
    for t in range(max(t_from, 1), T):
        for a in range(1, A):
            prev = der.eta[a - 1, t - 1, c]
            moved = prev + der.psin[a - 1, t - 1, c] - der.psout[a - 1, t - 1, c]
            if not moved > 0.0:
                return False
            der.eta[a, t, c] = moved * der.surv[a - 1, t - 1, c] * der.eps[a - 1, t - 1, c]
    return True


@njit(cache=True)
def _refresh_county(x, L, dat, der, c, shares):
    T = L[T_]
    _fill_surv(x, L, dat, der, c, 0, T)
    _fill_flows(x, L, der, c, 0, shares)
    _fill_flows(x, L, der, c, 1, shares)
    for t in range(T):
        _fill_eps(x, L, der, c, t)
    _fill_boundary(x, L, der, c)
    return _forward(L, der, c, 1)


@njit(cache=True)
def _obs_mu(values, a, t, reg, is_dist, dat):
    if is_dist:
        s = 0.0
        for k in range(dat.dist_ptr[reg], dat.dist_ptr[reg + 1]):
            s += values[a, t, dat.dist_members[k]]
        return math.log(s)
    return math.log(values[a, t, reg])


@njit(cache=True)
def _pop_term(i, dat, der):
    r = dat.plogy[i] - _obs_mu(der.eta, dat.pa[i], dat.pt[i], dat.preg[i], dat.pdist[i], dat)
    return dat.pconst[i] - 0.5 * r * r * dat.pprec[i]


@njit(cache=True)
def _mig_term(i, dat, der):
    values = der.psin if dat.mdir[i] == 0 else der.psout
    r = dat.mlogy[i] - _obs_mu(values, dat.ma[i], dat.mt[i], dat.mreg[i], dat.mdist[i], dat)
    return dat.mconst[i] - 0.5 * r * r * dat.mprec[i]


@njit(cache=True)
def _cell_constraint(L, dat, x, a, t, nat, net):
    """Constraint log-density of national cell (a, t)."""
    T = L[T_]
    lam = x[L[O_LAM] + a * T + t]
    om = x[L[O_OM] + a * T + t]
    s = math.log(nat)
    limit = MIGRATION_BALANCE * nat
    if L[SOFT] == 0:
        if lam < s and s <= om and -limit < net and net <= limit:
            return 0.0
        return -np.inf
    out = _log_expit((s - lam) / SOFT_SCALE) + _log_expit((om - s) / SOFT_SCALE)
    if net != 0.0:
        out += _log_expit((math.log(limit) - math.log(abs(net))) / SOFT_SCALE)
    return out


@njit(cache=True)
def full_refresh(x, L, dat, der, scr):
    """Recompute every cached quantity; returns (loglik, constraint) or -inf."""
    A, T, C = L[A_], L[T_], L[C_]
    for c in range(C):
        if not _refresh_county(x, L, dat, der, c, scr.shares):
            return -np.inf, -np.inf
    for a in range(A):
        for t in range(T):
            der.elam[a, t] = math.exp(x[L[O_LAM] + a * T + t])
            der.eom[a, t] = math.exp(x[L[O_OM] + a * T + t])
            n = 0.0
            m = 0.0
            for c in range(C):
                n += der.eta[a, t, c]
                m += der.psin[a, t, c] - der.psout[a, t, c]
            der.nat[a, t] = n
            der.net[a, t] = m
    ll = 0.0
    for i in range(len(der.pll)):
        der.pll[i] = _pop_term(i, dat, der)
        ll += der.pll[i]
    for i in range(len(der.mll)):
        der.mll[i] = _mig_term(i, dat, der)
        ll += der.mll[i]
    con = 0.0
    for a in range(A):
        for t in range(T):
            con += _cell_constraint(L, dat, x, a, t, der.nat[a, t], der.net[a, t])
    return ll, con


# ---------------------------------------------------------------- priors

@njit(cache=True)
def _sigma(x, L, k):
    return math.exp(x[L[O_SIG] + k])


@njit(cache=True)
def _family_prior(fam, x, L, dat, c, j):
    """Prior terms of family ``fam`` that involve county ``c`` (or entry ``j``)."""
    A, T, C = L[A_], L[T_], L[C_]
    if fam == F_ALPHA:
        return _lnorm(x[j], _sigma(x, L, 0))
    if fam == F_DELTA:
        sd = _sigma(x, L, 1)
        k = (j - L[O_DELTA]) % 2
        o = L[O_DELTA] + c * 2 + k
        out = _lnorm(x[o], sd)
        for t in range(1, T):
            out += _lnorm(x[o + t * C * 2] - x[o + (t - 1) * C * 2], sd)
        return out
    if fam == F_PIN or fam == F_POUT:
        sd = _sigma(x, L, 2 if fam == F_PIN else 3)
        o = (L[O_LPIN] if fam == F_PIN else L[O_LPOUT]) + c
        x0 = x[o]
        if not x0 < math.log(dat.ybound[c]):
            return -np.inf
        out = x0 - math.log(dat.ybound[c])
        out += _lnorm(x[o + C] - x0, sd)
        for t in range(2, T):
            out += _lnorm(x[o + t * C] - 2.0 * x[o + (t - 1) * C] + x[o + (t - 2) * C], sd)
        return out
    if fam == F_SIN or fam == F_SOUT:
        # uniform raw share in logit coordinates: log p + log(1 - p)
        z = x[j]
        return _log_expit(z) + _log_expit(-z)
    if fam == F_ZETA:
        return _lnorm(x[j], _sigma(x, L, 4))
    if fam == F_BFT:
        a = (j - L[O_BFT]) // C
        return _lnorm(x[j] - dat.prior_ft[a, c], BOUNDARY_SD)
    # F_BFA
    t = (j - L[O_BFA]) // C + 1
    return _lnorm(x[j] - dat.prior_fa[t, c], BOUNDARY_SD)


@njit(cache=True)
def _sigma_stats(x, L, k):
    """(count, sum of squares) of the innovations scaled by sigma ``k``."""
    A, T, C = L[A_], L[T_], L[C_]
    ss = 0.0
    n = 0
    if k == 0:
        for c in range(C):
            ss += x[L[O_ALPHA] + c] ** 2
        n = C
    elif k == 1:
        o = L[O_DELTA]
        for c in range(C):
            for q in range(2):
                prev = 0.0
                for t in range(T):
                    v = x[o + (t * C + c) * 2 + q]
                    ss += (v - prev) ** 2
                    prev = v
        n = 2 * C * T
    elif k == 2 or k == 3:
        o = L[O_LPIN] if k == 2 else L[O_LPOUT]
        for c in range(C):
            ss += (x[o + C + c] - x[o + c]) ** 2
            for t in range(2, T):
                ss += (x[o + t * C + c] - 2.0 * x[o + (t - 1) * C + c] + x[o + (t - 2) * C + c]) ** 2
        n = C * (T - 1)
    else:
        o = L[O_ZETA]
        for i in range((A - 1) * T * C):
            ss += x[o + i] ** 2
        n = (A - 1) * T * C
    return n, ss


@njit(cache=True)
def _sigma_log_density(log_sd, n, ss):
    """Half-normal prior (with log-Jacobian) plus the family's normal terms."""
    sd = math.exp(log_sd)
    return LOG_2 - 0.5 * LOG_2PI - 0.5 * sd * sd + log_sd - n * log_sd - 0.5 * ss / (sd * sd)


# ---------------------------------------------------------------- updates

@njit(cache=True)
def _backup(der, scr, c):
    A, T = scr.eta.shape
    for a in range(A):
        for t in range(T):
            scr.surv[a, t] = der.surv[a, t, c]
            scr.psin[a, t] = der.psin[a, t, c]
            scr.psout[a, t] = der.psout[a, t, c]
            scr.eps[a, t] = der.eps[a, t, c]
            scr.eta[a, t] = der.eta[a, t, c]


@njit(cache=True)
def _restore(der, scr, c):
    A, T = scr.eta.shape
    for a in range(A):
        for t in range(T):
            der.surv[a, t, c] = scr.surv[a, t]
            der.psin[a, t, c] = scr.psin[a, t]
            der.psout[a, t, c] = scr.psout[a, t]
            der.eps[a, t, c] = scr.eps[a, t]
            der.eta[a, t, c] = scr.eta[a, t]


@njit(cache=True)
def _finish(x, c, t_from, t_flow, lp_delta, L, dat, der, scr):
    """Accept or reject a proposal whose county-``c`` arrays are already refreshed.

    ``t_from`` is the first time whose populations can have changed and
    ``t_flow`` the first time whose migration flows can have changed.  On
    acceptance the cached sums and likelihood terms are committed; on
    rejection the county's derived arrays are restored (the caller restores
    ``x``).
    """
    A, T = L[A_], L[T_]
    t_chk = min(t_from, t_flow)
    con = 0.0
    for a in range(A):
        for t in range(t_chk, T):
            n = der.nat[a, t] + der.eta[a, t, c] - scr.eta[a, t]
            m = der.net[a, t] + (der.psin[a, t, c] - scr.psin[a, t]) - (der.psout[a, t, c] - scr.psout[a, t])
            scr.nat[a, t] = n
            scr.net[a, t] = m
            if L[SOFT] == 0:
                # hard band checked on the count scale to avoid logarithms
                limit = MIGRATION_BALANCE * n
                if not (der.elam[a, t] < n and n <= der.eom[a, t] and -limit < m and m <= limit):
                    _restore(der, scr, c)
                    return False
            else:
                con += (_cell_constraint(L, dat, x, a, t, n, m)
                        - _cell_constraint(L, dat, x, a, t, der.nat[a, t], der.net[a, t]))

    dll = 0.0
    for k in range(dat.pop_ptr[c], dat.pop_ptr[c + 1]):
        i = dat.pop_idx[k]
        if dat.pt[i] < t_from:
            continue
        v = _pop_term(i, dat, der)
        scr.pll[i] = v
        dll += v - der.pll[i]
    for k in range(dat.mig_ptr[c], dat.mig_ptr[c + 1]):
        i = dat.mig_idx[k]
        if dat.mt[i] < t_flow:
            continue
        v = _mig_term(i, dat, der)
        scr.mll[i] = v
        dll += v - der.mll[i]

    if math.log(np.random.random()) < lp_delta + dll + con:
        for a in range(A):
            for t in range(t_chk, T):
                der.nat[a, t] = scr.nat[a, t]
                der.net[a, t] = scr.net[a, t]
        for k in range(dat.pop_ptr[c], dat.pop_ptr[c + 1]):
            i = dat.pop_idx[k]
            if dat.pt[i] >= t_from:
                der.pll[i] = scr.pll[i]
        for k in range(dat.mig_ptr[c], dat.mig_ptr[c + 1]):
            i = dat.mig_idx[k]
            if dat.mt[i] >= t_flow:
                der.mll[i] = scr.mll[i]
        return True
    _restore(der, scr, c)
    return False


@njit(cache=True)
def _county_update(x, j, fam, c, t_from, t_flow, step, L, dat, der, scr):
    """Random-walk update of scalar ``x[j]`` touching county ``c``."""
    T, C = L[T_], L[C_]
    old = x[j]
    lp0 = _family_prior(fam, x, L, dat, c, j)
    x[j] = old + step * np.random.standard_normal()
    lp1 = _family_prior(fam, x, L, dat, c, j)
    if lp1 == -np.inf:
        x[j] = old
        return False

    _backup(der, scr, c)
    if fam == F_ALPHA:
        _fill_surv(x, L, dat, der, c, 0, T)
    elif fam == F_DELTA:
        t = (j - L[O_DELTA]) // (2 * C)
        _fill_surv(x, L, dat, der, c, t, t + 1)
    elif fam == F_PIN or fam == F_SIN:
        _fill_flows(x, L, der, c, 0, scr.shares)
    elif fam == F_POUT or fam == F_SOUT:
        _fill_flows(x, L, der, c, 1, scr.shares)
    elif fam == F_ZETA:
        t = ((j - L[O_ZETA]) // C) % T
        _fill_eps(x, L, der, c, t)
    else:
        _fill_boundary(x, L, der, c)
    if not _forward(L, der, c, t_from):
        _restore(der, scr, c)
        x[j] = old
        return False
    if _finish(x, c, t_from, t_flow, lp1 - lp0, L, dat, der, scr):
        return True
    x[j] = old
    return False


@njit(cache=True)
def _county_prior(x, L, dat, c):
    """Every prior term that involves county ``c``."""
    A, T, C = L[A_], L[T_], L[C_]
    lp = _family_prior(F_ALPHA, x, L, dat, c, L[O_ALPHA] + c)
    lp += _family_prior(F_DELTA, x, L, dat, c, L[O_DELTA])
    lp += _family_prior(F_DELTA, x, L, dat, c, L[O_DELTA] + 1)
    lp += _family_prior(F_PIN, x, L, dat, c, 0)
    lp += _family_prior(F_POUT, x, L, dat, c, 0)
    for a in range(A):
        lp += _family_prior(F_SIN, x, L, dat, c, L[O_LSIN] + a * C + c)
        lp += _family_prior(F_SOUT, x, L, dat, c, L[O_LSOUT] + a * C + c)
        lp += _family_prior(F_BFT, x, L, dat, c, L[O_BFT] + a * C + c)
    for a in range(A - 1):
        for t in range(T):
            lp += _family_prior(F_ZETA, x, L, dat, c, L[O_ZETA] + (a * T + t) * C + c)
    for t in range(1, T):
        lp += _family_prior(F_BFA, x, L, dat, c, L[O_BFA] + (t - 1) * C + c)
    return lp


@njit(cache=True)
def _block_update(x, idx, size, c, chol, step, L, dat, der, scr, saved, z):
    """Correlated random-walk proposal for the county-``c`` block ``idx[:size]``."""
    lp0 = _county_prior(x, L, dat, c)
    for k in range(size):
        z[k] = np.random.standard_normal()
    for k in range(size):
        saved[k] = x[idx[k]]
        dx = 0.0
        for m in range(k + 1):
            dx += chol[k, m] * z[m]
        x[idx[k]] += step * dx
    lp1 = _county_prior(x, L, dat, c)
    if lp1 != -np.inf:
        _backup(der, scr, c)
        if _refresh_county(x, L, dat, der, c, scr.shares):
            if _finish(x, c, 0, 0, lp1 - lp0, L, dat, der, scr):
                return True
        else:
            _restore(der, scr, c)
    for k in range(size):
        x[idx[k]] = saved[k]
    return False


@njit(cache=True)
def _sigma_update(x, k, step, L):
    n, ss = _sigma_stats(x, L, k)
    j = L[O_SIG] + k
    old = x[j]
    prop = old + step * np.random.standard_normal()
    log_ratio = _sigma_log_density(prop, n, ss) - _sigma_log_density(old, n, ss)
    if math.log(np.random.random()) < log_ratio:
        x[j] = prop
        return True
    return False


@njit(cache=True)
def _scale_move(x, k, step, L, dat, der, scr, x_old, ll, con):
    """Rescale sigma ``k`` together with every innovation it governs.

    Jointly multiplying a standard deviation and its normal variables by
    ``exp(u)`` leaves their prior times the Jacobian unchanged, so only the
    half-normal prior on the sd, the likelihood and the constraints enter.
    Returns (accepted, loglik, constraint).
    """
    A, T, C = L[A_], L[T_], L[C_]
    x_old[:] = x
    u = step * np.random.standard_normal()
    f = math.exp(u)
    j = L[O_SIG] + k
    sd0 = math.exp(x[j])
    x[j] += u
    sd1 = math.exp(x[j])
    if k == 0:
        for c in range(C):
            x[L[O_ALPHA] + c] *= f
    elif k == 1:
        for i in range(T * C * 2):
            x[L[O_DELTA] + i] *= f
    else:
        for i in range((A - 1) * T * C):
            x[L[O_ZETA] + i] *= f
    lp = (-0.5 * sd1 * sd1 + math.log(sd1)) - (-0.5 * sd0 * sd0 + math.log(sd0))
    ll1, con1 = full_refresh(x, L, dat, der, scr)
    if ll1 != -np.inf and con1 != -np.inf:
        if math.log(np.random.random()) < lp + ll1 - ll + con1 - con:
            return True, ll1, con1
    x[:] = x_old
    ll0, con0 = full_refresh(x, L, dat, der, scr)
    return False, ll0, con0


@njit(cache=True)
def _bounds_update(x, L, dat, der, steps, acc):
    """Draw the national bounds from their full conditionals.

    Hard constraints make each conditional a truncated normal; in soft mode
    the bounds are updated by random-walk Metropolis instead.
    """
    A, T = L[A_], L[T_]
    lo_shift = math.log(LOWER_FACTOR)
    hi_shift = math.log(UPPER_FACTOR)
    for a in range(A):
        for t in range(T):
            lw = dat.log_wpp[a, t]
            s = math.log(der.nat[a, t])
            jl = L[O_LAM] + a * T + t
            jo = L[O_OM] + a * T + t
            if L[SOFT] == 0:
                x[jl] = _truncnorm_upper(lw + lo_shift, BOUND_SD, min(lw, s))
                if x[jl] >= s:
                    x[jl] = s - 1e-12 * max(1.0, abs(s))
                x[jo] = _truncnorm_lower(lw + hi_shift, BOUND_SD, max(lw, s))
                continue
            for jj, mean, sign in ((jl, lw + lo_shift, 1.0), (jo, lw + hi_shift, -1.0)):
                old = x[jj]
                prop = old + steps[jj] * np.random.standard_normal()
                if sign * (prop - lw) > 0.0:
                    continue
                d0 = -0.5 * ((old - mean) / BOUND_SD) ** 2 + _log_expit(sign * (s - old) / SOFT_SCALE)
                d1 = -0.5 * ((prop - mean) / BOUND_SD) ** 2 + _log_expit(sign * (s - prop) / SOFT_SCALE)
                if math.log(np.random.random()) < d1 - d0:
                    x[jj] = prop
                    acc[jj] += 1


@njit(cache=True)
def run_sweeps(x, L, dat, der, scr, log_steps, acc, tries, n_sweeps, thin, adapt_from,
               target_1d, seed, out, out_start, x_old, blk_idx, blk_size, blk_county, blk_chol,
               n_block_props, target_block):
    """Run ``n_sweeps`` full sweeps, storing every ``thin``-th state in ``out``.

    When ``adapt_from >= 0`` step sizes follow a Robbins-Monro recursion
    towards ``target_1d`` acceptance (``target_block`` for block proposals),
    with sweep counter starting at ``adapt_from``; otherwise they stay
    frozen.  Each sweep makes ``n_block_props`` proposals per block.
    """
    np.random.seed(seed)
    A, T, C = L[A_], L[T_], L[C_]
    P = len(x)
    n_blocks = blk_idx.shape[0]
    saved = np.empty(blk_idx.shape[1])
    z = np.empty(blk_idx.shape[1])
    ll, con = full_refresh(x, L, dat, der, scr)
    if ll == -np.inf or con == -np.inf:
        return -1
    stored = 0
    for sweep in range(n_sweeps):
        gain = 0.0
        if adapt_from >= 0:
            gain = min(0.5, 3.0 / (adapt_from + sweep + 1.0) ** 0.6)
        for c in range(C):
            j = L[O_ALPHA] + c
            _adapt(_county_update(x, j, F_ALPHA, c, 1, T, math.exp(log_steps[j]), L, dat, der, scr),
                   j, gain, target_1d, log_steps, acc, tries)
            for t in range(T):
                for q in range(2):
                    j = L[O_DELTA] + (t * C + c) * 2 + q
                    _adapt(_county_update(x, j, F_DELTA, c, t + 1, T, math.exp(log_steps[j]), L, dat, der, scr),
                           j, gain, target_1d, log_steps, acc, tries)
            for t in range(T):
                j = L[O_LPIN] + t * C + c
                _adapt(_county_update(x, j, F_PIN, c, t + 1, t, math.exp(log_steps[j]), L, dat, der, scr),
                       j, gain, target_1d, log_steps, acc, tries)
                j = L[O_LPOUT] + t * C + c
                _adapt(_county_update(x, j, F_POUT, c, t + 1, t, math.exp(log_steps[j]), L, dat, der, scr),
                       j, gain, target_1d, log_steps, acc, tries)
            for a in range(A):
                j = L[O_LSIN] + a * C + c
                _adapt(_county_update(x, j, F_SIN, c, 1, 0, math.exp(log_steps[j]), L, dat, der, scr),
                       j, gain, target_1d, log_steps, acc, tries)
                j = L[O_LSOUT] + a * C + c
                _adapt(_county_update(x, j, F_SOUT, c, 1, 0, math.exp(log_steps[j]), L, dat, der, scr),
                       j, gain, target_1d, log_steps, acc, tries)
            for a in range(A - 1):
                for t in range(T):
                    j = L[O_ZETA] + (a * T + t) * C + c
                    _adapt(_county_update(x, j, F_ZETA, c, t + 1, T, math.exp(log_steps[j]), L, dat, der, scr),
                           j, gain, target_1d, log_steps, acc, tries)
            for a in range(A):
                j = L[O_BFT] + a * C + c
                _adapt(_county_update(x, j, F_BFT, c, 0, T, math.exp(log_steps[j]), L, dat, der, scr),
                       j, gain, target_1d, log_steps, acc, tries)
            for t in range(1, T):
                j = L[O_BFA] + (t - 1) * C + c
                _adapt(_county_update(x, j, F_BFA, c, t, T, math.exp(log_steps[j]), L, dat, der, scr),
                       j, gain, target_1d, log_steps, acc, tries)
        for r in range(n_block_props):
            for b in range(n_blocks):
                j = P + N_SCALE_MOVES + b
                ok = _block_update(x, blk_idx[b], blk_size[b], blk_county[b], blk_chol[b],
                                   math.exp(log_steps[j]), L, dat, der, scr, saved, z)
                _adapt(ok, j, gain, target_block, log_steps, acc, tries)
        for k in range(5):
            j = L[O_SIG] + k
            _adapt(_sigma_update(x, k, math.exp(log_steps[j]), L), j, gain, target_1d, log_steps, acc, tries)
        ll, con = full_refresh(x, L, dat, der, scr)
        for m in range(N_SCALE_MOVES):
            j = P + m
            k = (0, 1, 4)[m]
            ok, ll, con = _scale_move(x, k, math.exp(log_steps[j]), L, dat, der, scr, x_old, ll, con)
            _adapt(ok, j, gain, target_1d, log_steps, acc, tries)
        _bounds_update(x, L, dat, der, np.exp(log_steps), acc)
        if L[SOFT] != 0:
            for i in range(2 * A * T):
                tries[L[O_LAM] + i] += 1
        ll, con = full_refresh(x, L, dat, der, scr)
        if ll == -np.inf or con == -np.inf:
            return -2
        if (sweep + 1) % thin == 0 and out.shape[0] > 0:
            out[out_start + stored, :] = x
            stored += 1
    return stored


@njit(cache=True)
def _adapt(accepted, j, gain, target, log_steps, acc, tries):
    tries[j] += 1
    if accepted:
        acc[j] += 1
    if gain > 0.0:
        log_steps[j] += gain * ((1.0 if accepted else 0.0) - target)


@njit(cache=True)
def state_log_posterior(x, L, dat, der, scr):
    """Full log-posterior of packed state ``x`` computed from scratch."""
    A, T, C = L[A_], L[T_], L[C_]
    ll, con = full_refresh(x, L, dat, der, scr)
    if ll == -np.inf or con == -np.inf:
        return -np.inf
    lp = 0.0
    for c in range(C):
        lp += _county_prior(x, L, dat, c)
    for k in range(5):
        sd = _sigma(x, L, k)
        lp += LOG_2 - 0.5 * LOG_2PI - 0.5 * sd * sd + math.log(sd)
    lo_shift = math.log(LOWER_FACTOR)
    hi_shift = math.log(UPPER_FACTOR)
    for a in range(A):
        for t in range(T):
            lw = dat.log_wpp[a, t]
            lam = x[L[O_LAM] + a * T + t]
            om = x[L[O_OM] + a * T + t]
            if lam > lw or om < lw:
                return -np.inf
            zl = (lw - (lw + lo_shift)) / BOUND_SD
            zo = (lw - (lw + hi_shift)) / BOUND_SD
            lp += _lnorm(lam - lw - lo_shift, BOUND_SD) - math.log(_norm_cdf(zl))
            lp += _lnorm(om - lw - hi_shift, BOUND_SD) - math.log(_norm_cdf(-zo))
    return lp + ll + con


def n_sampled(data: ModelData) -> int:
    """Length of the step-size vector: parameters, scale moves, county blocks."""
    return n_params(data.dims) + N_SCALE_MOVES + data.dims[2]


def county_blocks(data: ModelData) -> tuple[np.ndarray, np.ndarray]:
    """Packed indices of each county's mortality, migration and multiplier parameters.

    Returns ``(idx, size)`` with ``idx`` of shape (C, K); boundary
    populations are left to the scalar updates.
    """
    A, T, C = data.dims
    lay = layout(data.dims)
    blocks = []
    for c in range(C):
        idx = [lay["alpha0"][0].start + c]
        for name in ("delta", "log_total_in", "log_total_out", "logit_share_in",
                     "logit_share_out", "zeta"):
            sl, shape = lay[name]
            grid = np.arange(sl.start, sl.stop).reshape(shape)
            county_axis = {"delta": 1, "zeta": 2}.get(name, 1)
            idx.extend(np.take(grid, c, axis=county_axis).ravel())
        blocks.append(sorted(idx))
    size = np.array([len(b) for b in blocks], dtype=np.int64)
    out = np.zeros((C, size.max()), dtype=np.int64)
    for c, b in enumerate(blocks):
        out[c, :len(b)] = b
    return out, size


SCALE_MOVE_NAMES = tuple(f"scale_{SIGMA_NAMES[k]}" for k in (0, 1, 4))
