"""Loop-based log-posterior written independently of the package internals.

Works from the raw world tables (census frames, national inputs, boundary
proportions) and evaluates every density term one scalar at a time with
scipy.stats distributions.
"""
import math

import numpy as np
from scipy import stats


def _unpack(x, A, T, C):
    sizes = [("alpha0", C), ("delta", T * C * 2), ("lin", T * C), ("lout", T * C),
             ("sin", A * C), ("sout", A * C), ("zeta", (A - 1) * T * C), ("ft", A * C),
             ("fa", (T - 1) * C), ("lsig", 5), ("lam", A * T), ("om", A * T)]
    out, pos = {}, 0
    for name, n in sizes:
        out[name] = list(x[pos:pos + n])
        pos += n
    assert pos == len(x)

    def at(name, *idx_dims):
        # row-major index
        idx, dims = idx_dims[::2], idx_dims[1::2]
        flat = 0
        for i, d in zip(idx, dims):
            flat = flat * d + i
        return out[name][flat]

    return out, at


def _expit(z):
    return 1.0 / (1.0 + math.exp(-z))


def _log_eps(zeta_col):
    n = len(zeta_col) + 1
    d = np.zeros((n - 1, n))
    for i in range(n - 1):
        d[i, i], d[i, i + 1] = -1.0, 1.0
    return d.T @ np.linalg.inv(d @ d.T) @ np.asarray(zeta_col)


def _first_period_bound(world):
    """Observed first-census county totals; district totals split by the
    county shares of the last county-level census."""
    g = world.grid
    pop = world.populations
    first = pop["year"].min()
    last_county = pop[pop["region_level"] == "county"]["year"].max()
    ref = pop[(pop["year"] == last_county) & (pop["region_level"] == "county")]
    county_ref = {c: ref[ref["region_id"] == c]["count"].sum() for c in g.counties}
    bound = []
    for c in g.counties:
        d = g.county_to_district[c]
        rows = pop[pop["year"] == first]
        own = rows[(rows["region_level"] == "county") & (rows["region_id"] == c)]["count"].sum()
        dist = rows[(rows["region_level"] == "district") & (rows["region_id"] == d)]["count"].sum()
        mates = [k for k in g.counties if g.county_to_district[k] == d]
        share = county_ref[c] / sum(county_ref[k] for k in mates)
        bound.append(own + dist * share)
    return bound


def oracle_log_posterior(x, world, sampling_fraction=0.1):
    g = world.grid
    A, T, C = g.n_age, g.n_time, g.n_county
    v, at = _unpack(np.asarray(x, dtype=float), A, T, C)
    wpp = world.national.wpp_pop
    basis = world.basis
    props = world.props.prop
    lp = 0.0

    sig = [math.exp(s) for s in v["lsig"]]
    s_alpha, s_delta, s_in, s_out, s_zeta = sig
    for s in sig:
        lp += stats.halfnorm.logpdf(s) + math.log(s)

    for c in range(C):
        lp += stats.norm.logpdf(v["alpha0"][c], 0, s_alpha)
    for c in range(C):
        for k in range(2):
            prev = 0.0
            for t in range(T):
                d = at("delta", t, T, c, C, k, 2)
                lp += stats.norm.logpdf(d - prev, 0, s_delta)
                prev = d

    bound = _first_period_bound(world)
    for name, sd in (("lin", s_in), ("lout", s_out)):
        for c in range(C):
            lx = [at(name, t, T, c, C) for t in range(T)]
            psi0 = math.exp(lx[0])
            if not psi0 < bound[c]:
                return -math.inf
            lp += stats.uniform.logpdf(psi0, 0, bound[c]) + lx[0]
            lp += stats.norm.logpdf(lx[1] - lx[0], 0, sd)
            for t in range(2, T):
                lp += stats.norm.logpdf(lx[t] - 2 * lx[t - 1] + lx[t - 2], 0, sd)

    for name in ("sin", "sout"):
        for z in v[name]:
            p = _expit(z)
            lp += stats.uniform.logpdf(p) + math.log(p) + math.log(1 - p)

    for z in v["zeta"]:
        lp += stats.norm.logpdf(z, 0, s_zeta)

    for a in range(A):
        for c in range(C):
            mean = math.log(wpp[a, 0] * props[a, 0, c])
            lp += stats.norm.logpdf(at("ft", a, A, c, C), mean, 0.01)
    for t in range(1, T):
        for c in range(C):
            mean = math.log(wpp[0, t] * props[0, t, c])
            lp += stats.norm.logpdf(at("fa", t - 1, T - 1, c, C), mean, 0.01)

    for a in range(A):
        for t in range(T):
            lw = math.log(wpp[a, t])
            lo_mean, hi_mean = math.log(0.9 * wpp[a, t]), math.log(1.1 * wpp[a, t])
            lam, om = at("lam", a, A, t, T), at("om", a, A, t, T)
            lp += stats.truncnorm.logpdf(lam, -np.inf, (lw - lo_mean) / 0.1, lo_mean, 0.1)
            lp += stats.truncnorm.logpdf(om, (lw - hi_mean) / 0.1, np.inf, hi_mean, 0.1)
    if not math.isfinite(lp):
        return -math.inf

    # process model, one cell at a time
    eta = np.zeros((A, T, C))
    psi = {"in": np.zeros((A, T, C)), "out": np.zeros((A, T, C))}
    for c in range(C):
        for direction, tot, share in (("in", "lin", "sin"), ("out", "lout", "sout")):
            raw = [_expit(at(share, a, A, c, C)) for a in range(A)]
            for a in range(A):
                for t in range(T):
                    psi[direction][a, t, c] = math.exp(at(tot, t, T, c, C)) * raw[a] / sum(raw)
        for a in range(A):
            eta[a, 0, c] = math.exp(at("ft", a, A, c, C))
        for t in range(1, T):
            eta[0, t, c] = math.exp(at("fa", t - 1, T - 1, c, C))
        for t in range(1, T):
            leps = _log_eps([at("zeta", a, A - 1, t - 1, T, c, C) for a in range(A - 1)])
            for a in range(1, A):
                s = t - 1
                b1 = basis.national_coeffs[s, 0] + at("delta", s, T, c, C, 0, 2)
                b2 = basis.national_coeffs[s, 1] + at("delta", s, T, c, C, 1, 2)
                z = (v["alpha0"][c] + basis.mean_schedule[a - 1] + b1 * basis.pc1[a - 1]
                     + b2 * basis.pc2[a - 1])
                gamma = _expit(z)
                prev = eta[a - 1, s, c]
                phi = (psi["in"][a - 1, s, c] - psi["out"][a - 1, s, c]) / prev
                if 1 + phi <= 0:
                    return -math.inf
                eta[a, t, c] = prev * (1 - gamma) * (1 + phi) * math.exp(leps[a - 1])

    # constraints
    for a in range(A):
        for t in range(T):
            total = sum(eta[a, t, c] for c in range(C))
            net = sum(psi["in"][a, t, c] - psi["out"][a, t, c] for c in range(C))
            if not at("lam", a, A, t, T) < math.log(total) <= at("om", a, A, t, T):
                return -math.inf
            if not -0.1 * total < net <= 0.1 * total:
                return -math.inf

    def region_value(arr, row):
        a = g.age_index(row.age_start)
        t = g.time_index(row.year)
        if row.region_level == "county":
            return arr[a, t, g.county_index[row.region_id]]
        return sum(arr[a, t, g.county_index[c]] for c in g.counties
                   if g.county_to_district[c] == row.region_id)

    f = sampling_fraction
    for row in world.populations.itertuples(index=False):
        var = (1 - f) / (f * row.count)
        lp += stats.norm.logpdf(math.log(row.count), math.log(region_value(eta, row)), math.sqrt(var))
    for row in world.migration.itertuples(index=False):
        count, var = row.count, (1 - f) / (f * row.count) if row.count > 0 else None
        if count <= 0:
            count = 0.5
            var = 2 * (1 - f) / (f * count)
        mu = region_value(psi[row.direction], row)
        lp += stats.norm.logpdf(math.log(count), math.log(mu), math.sqrt(var))
    return lp
