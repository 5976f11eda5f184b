import numpy as np
import pytest

from policy_its import mcmc
from policy_its.errors import OracleDisagreement, ValidationError
from policy_its.model import LogPosterior, PriorSpec
from support import random_theta, random_toy, toy_design

PROPER = PriorSpec(intercept_variance=1000.0)


def prior_only_design():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(30), rng.standard_normal((30, 2))])
    return toy_design(X, rng.integers(0, 2, 30), w=np.zeros(30), t=rng.integers(0, 3, 30),
                      l=rng.integers(0, 4, 30), n_years=3, n_areas=4)


@pytest.fixture(scope="module")
def prior_run():
    return mcmc.mcmc_oracle(prior_only_design(), priors=PROPER, iterations=20000,
                            warmup=2000, thin=5, seed=3)


def test_prior_only_recovers_prior_sd(prior_run):
    sd = prior_run.sd()[:3]
    np.testing.assert_allclose(sd, np.sqrt(1000.0), rtol=0.05)
    assert prior_run.converged


def test_prior_only_log_sigma_follows_pc_prior(prior_run):
    # With no data the log sigmas follow the exponential prior on sigma,
    # whose mean is 1 / lambda.
    sig = np.exp(prior_run.flat[:, -2:])
    np.testing.assert_allclose(sig.mean(axis=0), 1.0 / np.log(10.0), rtol=0.1)


def test_target_matches_model_log_posterior():
    # The sampler uses its own density code; it must agree with the model
    # up to the constant normalizers of the priors.
    rng = np.random.default_rng(5)
    d = random_toy(rng)
    lp = LogPosterior(d, priors=PROPER)
    target = mcmc._Target(d, None, None, PROPER)
    thetas = np.array([random_theta(rng, d.layout) for _ in range(6)])
    diff = target(thetas) - np.array([lp.value(t) for t in thetas])
    np.testing.assert_allclose(diff, diff[0], atol=1e-9)


def test_fixed_seed_identical_chains():
    d = random_toy(np.random.default_rng(1))
    a = mcmc.mcmc_oracle(d, priors=PROPER, iterations=300, warmup=100, thin=3, seed=7)
    b = mcmc.mcmc_oracle(d, priors=PROPER, iterations=300, warmup=100, thin=3, seed=7)
    np.testing.assert_array_equal(a.draws, b.draws)
    c = mcmc.mcmc_oracle(d, priors=PROPER, iterations=300, warmup=100, thin=3, seed=8)
    assert not np.array_equal(a.draws, c.draws)
    assert a.draws.shape == (4, 100, d.layout.n_params)


def test_needs_two_chains():
    d = random_toy(np.random.default_rng(1))
    with pytest.raises(ValidationError):
        mcmc.mcmc_oracle(d, chains=1, iterations=10)


def test_split_rhat_iid_near_one():
    rng = np.random.default_rng(0)
    r = mcmc.split_rhat(rng.standard_normal((4, 2000, 3)))
    assert np.all(np.abs(r - 1.0) < 0.01)


def test_split_rhat_detects_shifted_chain():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 1000))
    x[0] += 1.0
    assert mcmc.split_rhat(x)[0] > 1.05


def test_split_rhat_detects_drift_within_chain():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 1000)) + np.linspace(0, 3, 1000)
    assert mcmc.split_rhat(x)[0] > 1.05


def ar1(rng, phi, chains, n):
    x = np.empty((chains, n))
    x[:, 0] = rng.standard_normal(chains) / np.sqrt(1 - phi ** 2)
    for t in range(1, n):
        x[:, t] = phi * x[:, t - 1] + rng.standard_normal(chains)
    return x


@pytest.mark.parametrize("phi", [0.0, 0.5, 0.9])
def test_ess_matches_ar1_closed_form(phi):
    # For AR(1) the integrated autocorrelation time is (1 + phi) / (1 - phi).
    rng = np.random.default_rng(11)
    chains, n = 4, 20000
    x = ar1(rng, phi, chains, n)
    expected = chains * n * (1 - phi) / (1 + phi)
    assert mcmc.ess(x)[0] == pytest.approx(expected, rel=0.15)


def test_comparison_refused_when_not_converged(small_fit):
    fitted = small_fit[0]
    lay = fitted.layout
    rng = np.random.default_rng(0)
    draws = rng.standard_normal((4, 50, lay.n_params))
    draws[0] += 5.0
    bad = mcmc.OracleResult(draws, lay.parameter_names(), mcmc.split_rhat(draws),
                            mcmc.ess(draws), {}, 0)
    assert not bad.converged and bad.flagged()
    with pytest.raises(OracleDisagreement):
        mcmc.compare_with_laplace(fitted, bad)


def test_comparison_columns(small_fit):
    fitted = small_fit[0]
    lay = fitted.layout
    rng = np.random.default_rng(0)
    mean = fitted.latent_mean()
    sd = np.sqrt(np.diag(fitted.latent_cov()))
    draws = np.concatenate([mean + sd * rng.standard_normal((4, 400, lay.n_latent)),
                            rng.standard_normal((4, 400, 2))], axis=2)
    res = mcmc.OracleResult(draws, lay.parameter_names(), mcmc.split_rhat(draws),
                            mcmc.ess(draws), {}, 0)
    table = mcmc.compare_with_laplace(fitted, res)
    assert list(table["name"]) == lay.fixed_effects
    np.testing.assert_allclose(table["std_diff"],
                               np.abs(table["laplace_mean"] - table["mcmc_mean"]) / table["mcmc_sd"])
    assert table["ok"].all()
