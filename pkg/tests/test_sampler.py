import numpy as np
import pytest
from scipy import stats

from bayesccp.posterior import pack, vector_log_posterior
from bayesccp.sampler.core import PosteriorDraws, SamplerConfig, SamplerError, run_chains
from bayesccp.sampler.diagnostics import ess, rhat, summarize
from bayesccp.sampler.model import (
    block_cholesky,
    derived_draws,
    find_initial,
    fit_model,
    kernel_log_posterior,
)


def std_normal(x):
    return -0.5 * float(x @ x)


def start(rng):
    return rng.normal(size=1)


def test_standard_normal_toy():
    cfg = SamplerConfig(n_chains=4, n_warmup=500, n_samples=1000, seed=1)
    draws = run_chains(cfg, std_normal, start).pooled()[:, 0]
    assert abs(draws.mean()) < 0.1
    assert abs(draws.std() - 1) < 0.1


def test_seed_determinism():
    cfg = SamplerConfig(n_chains=2, n_warmup=100, n_samples=200, seed=9)
    a = run_chains(cfg, std_normal, start).draws
    b = run_chains(cfg, std_normal, start).draws
    assert a.tobytes() == b.tobytes()


def test_scalar_acceptance_adapts():
    cfg = SamplerConfig(n_chains=2, n_warmup=2000, n_samples=2000, seed=3)
    rates = run_chains(cfg, std_normal, start).acceptance_rates["all"]
    assert np.all((rates > 0.3) & (rates < 0.6))


def test_block_plan_must_cover():
    cfg = SamplerConfig(n_chains=2, n_warmup=10, n_samples=10, block_plan={"a": [0]})
    with pytest.raises(SamplerError, match="cover"):
        run_chains(cfg, lambda x: -0.5 * x @ x, lambda r: r.normal(size=2))


def test_initialization_failure():
    cfg = SamplerConfig(n_chains=2, n_warmup=1, n_samples=1)
    with pytest.raises(SamplerError, match="initial"):
        run_chains(cfg, lambda x: -np.inf, start)


@pytest.mark.parametrize("kwargs", [dict(n_chains=1), dict(target_accept=1.0), dict(thin=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SamplerConfig(**kwargs)


def test_block_plan_toy():
    cov = np.array([[1.0, 0.8], [0.8, 1.0]])
    prec = np.linalg.inv(cov)
    cfg = SamplerConfig(n_chains=2, n_warmup=1000, n_samples=3000, seed=4,
                        block_plan={"x": [0], "y": [1]})
    draws = run_chains(cfg, lambda x: -0.5 * x @ prec @ x, lambda r: r.normal(size=2))
    assert set(draws.acceptance_rates) == {"x", "y"}
    assert np.cov(draws.pooled().T)[0, 1] == pytest.approx(0.8, abs=0.15)


def test_different_seeds_indistinguishable():
    pvalues = []
    for k in range(20):
        a = run_chains(SamplerConfig(n_chains=2, n_warmup=300, n_samples=600, seed=2 * k, thin=5),
                       std_normal, start).pooled()[:, 0]
        b = run_chains(SamplerConfig(n_chains=2, n_warmup=300, n_samples=600, seed=2 * k + 1, thin=5),
                       std_normal, start).pooled()[:, 0]
        pvalues.append(stats.ks_2samp(a, b).pvalue)
    # at most the expected share of false positives (binomial 20 x 0.01, generous)
    assert np.sum(np.array(pvalues) < 0.01) <= 2


def test_rhat_identical_streams(rng):
    stream = rng.normal(size=20_000)
    assert rhat(np.vstack([stream, stream])) == pytest.approx(1.0, abs=0.01)


def test_rhat_separated_chains(rng):
    chains = np.vstack([rng.normal(0, 1, 1000), rng.normal(10, 1, 1000)])
    assert rhat(chains) > 1.1
    assert rhat(chains, rank_normalized=True) > 1.1


def test_rhat_hand_formula():
    # split halves with means (0, 1) and (2, 3) and within-variance 1
    base = np.array([-1.0, 1.0, -1.0, 1.0])
    chains = np.vstack([np.r_[base[:2], base[2:] + 1], np.r_[base[:2] + 2, base[2:] + 3]])
    m, n = 4, 2
    within = 2.0
    between = n * np.var([0, 1, 2, 3], ddof=1)
    expected = np.sqrt(((n - 1) / n * within + between / n) / within)
    assert rhat(chains) == pytest.approx(expected)


def test_rhat_constant_chains_degenerate():
    assert np.isnan(rhat(np.ones((2, 100))))


def test_rhat_needs_two_chains():
    with pytest.raises(ValueError):
        rhat(np.ones((1, 100)))


def test_ess_independent_draws(rng):
    x = rng.normal(size=(4, 5000))
    assert 0.8 * x.size < ess(x) < 1.2 * x.size


def test_ess_autocorrelated(rng):
    phi = 0.9
    n = 20_000
    x = np.zeros((2, n))
    for i in range(1, n):
        x[:, i] = phi * x[:, i - 1] + rng.normal(size=2)
    expected = x.size * (1 - phi) / (1 + phi)
    assert ess(x) == pytest.approx(expected, rel=0.25)


def test_summarize_order_statistics():
    draws = np.arange(1.0, 101.0).reshape(2, 50)[:, :, None]
    row = summarize(draws).table.iloc[0]
    assert row["median"] == 50.5
    assert row["q2.5"] == pytest.approx(3.475)
    assert row["q97.5"] == pytest.approx(97.525)


def test_summarize_constant():
    row = summarize(np.full((2, 10, 1), 4.2)).table.iloc[0]
    for key in ("median", "q2.5", "q97.5", "q5", "q95"):
        assert row[key] == 4.2
    assert np.isnan(row["rhat"])


def test_summarize_transform_before_quantiles(rng):
    x = rng.normal(size=(2, 101, 1))
    s = summarize(x, transform=np.exp, names=["ex"])
    assert s.row("ex")["median"] == pytest.approx(np.exp(np.median(x)))


def test_summarize_empty():
    with pytest.raises(ValueError):
        summarize(np.zeros((2, 0, 1)))


def test_draws_csv_round_trip(tmp_path, rng):
    d = PosteriorDraws(rng.normal(size=(2, 5, 3)), ["a", "b[1,2]", "c"], {}, 7)
    paths = d.write_csv(tmp_path)
    assert [p.name for p in paths] == ["draws_chain0.csv", "draws_chain1.csv"]
    assert paths[0].read_text().splitlines()[0] == "iteration,param,value"
    back = PosteriorDraws.read_csv(paths)
    assert back.draws.tobytes() == d.draws.tobytes()
    assert back.param_names == d.param_names


def test_block_cholesky_reproduces_covariance(rng):
    cov = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.3], [0.0, 0.3, 0.5]])
    states = rng.multivariate_normal(np.zeros(3), cov, size=20_000)
    chol = block_cholesky(states, np.array([[0, 1, 2]]), np.array([3]), shrink=0.0)
    np.testing.assert_allclose(chol[0] @ chol[0].T, cov, rtol=0.05, atol=0.02)


@pytest.fixture(scope="module")
def short_fit(tiny_data):
    cfg = SamplerConfig(n_chains=2, n_warmup=200, n_samples=200, thin=2, seed=5)
    return fit_model(tiny_data, cfg)


def test_model_draws_in_support(short_fit, tiny_data):
    f = vector_log_posterior(tiny_data)
    for x in short_fit.pooled()[::10]:
        assert np.isfinite(f(x))


def test_model_fit_deterministic(short_fit, tiny_data):
    again = fit_model(tiny_data, SamplerConfig(n_chains=2, n_warmup=200, n_samples=200, thin=2,
                                               seed=5))
    assert again.draws.tobytes() == short_fit.draws.tobytes()


def test_model_acceptance_recorded(short_fit, tiny_data):
    rates = short_fit.acceptance_rates
    assert "scale_alpha" in rates
    assert any(k.startswith("block[") for k in rates)
    alpha = rates[short_fit.param_names[0]]
    assert np.all((alpha > 0.15) & (alpha < 0.75))


def test_derived_draws_shapes(short_fit, tiny_data):
    out = derived_draws(short_fit, tiny_data)
    A, T, C = tiny_data.dims
    for value in out.values():
        assert value.shape == (2, 100, A, T, C)
    np.testing.assert_allclose(out["log_eps"].sum(axis=2), 0.0, atol=1e-12)


def test_initial_state_valid(tiny_data, rng):
    state = find_initial(tiny_data, rng)
    x = pack(state)
    assert np.isfinite(vector_log_posterior(tiny_data)(x))
    assert kernel_log_posterior(tiny_data, x) == pytest.approx(vector_log_posterior(tiny_data)(x))
