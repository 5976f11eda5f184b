import json

import mpmath
import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from policy_its import model
from policy_its.cohort import CONFOUNDERS, DataDictionary, StudyWindow, load_dictionary
from policy_its.errors import NonFiniteError, ValidationError
from policy_its.model import LogPosterior, ParameterVector, PriorSpec
from support import random_theta, random_toy, toy_design

mpmath.mp.dps = 50


def obs_frame(rows):
    base = {"person_id": "P", "area_id": "A1", "interview_year": 2015, "outcome": 0,
            "exposed": 0, "age_band": "[16,25)", "education": "Degree or higher",
            "ethnicity": "White", "marital_status": "Unmarried", "sex": "Male",
            "deprivation_decile": 1, "ethnic_mix_quintile": 1, "weight": 1.0}
    return pd.DataFrame([base | r for r in rows])


WINDOW = StudyWindow(2010, 2020)


# -- design ------------------------------------------------------------------

def test_control_row_has_zero_exposure_block():
    d = model.build_design(obs_frame([{"interview_year": 2014}]), {"A1": 2016}, WINDOW)
    row = d.row(0)
    np.testing.assert_array_equal(row.its_block, [1, -2, 0, 0])
    np.testing.assert_array_equal(row.exposure_block, 0)


def test_exposed_row_at_year_zero():
    d = model.build_design(obs_frame([{"interview_year": 2016, "exposed": 1}]), {"A1": 2016}, WINDOW)
    row = d.row(0)
    np.testing.assert_array_equal(row.its_block, [1, 0, 1, 0])
    np.testing.assert_array_equal(row.exposure_block, [1, 0, 1, 0])


def test_single_level_categorical_adds_no_columns():
    raw = load_dictionary().to_dict()
    raw["levels"]["sex"] = ["Male"]
    d = model.build_design(obs_frame([{}]), {"A1": 2016}, WINDOW, dictionary=DataDictionary.from_dict(raw))
    assert not any(c.startswith("sex[") for c in d.layout.fixed_effects)
    assert d.layout.reference_levels["sex"] == "Male"
    full = model.build_design(obs_frame([{}]), {"A1": 2016}, WINDOW)
    assert full.layout.n_fixed == d.layout.n_fixed + 1


def test_dummy_counts_per_categorical():
    d = model.build_design(obs_frame([{}]), {"A1": 2016}, WINDOW)
    levels = load_dictionary().levels
    for col in CONFOUNDERS:
        cols = [c for c in d.layout.fixed_effects if c.startswith(col + "[")]
        assert len(cols) == len(levels[col]) - 1


def test_unknown_area_and_level_rejected():
    with pytest.raises(ValidationError, match="A1"):
        model.build_design(obs_frame([{}]), {"B": 2016}, WINDOW)
    with pytest.raises(ValidationError, match="Martian"):
        model.build_design(obs_frame([{"ethnicity": "Martian"}]), {"A1": 2016}, WINDOW)


def test_never_aware_area_all_pre(desk):
    d = model.build_design(obs_frame([{"interview_year": y} for y in range(2010, 2021)]),
                           {"A1": None}, WINDOW)
    assert (d.frame["intervention"] == 0).all()
    assert (d.frame["year_post"] == 0).all()


def test_interaction_columns_are_products(desk):
    design, _, _ = desk
    X = design.X
    names = design.layout.fixed_effects
    exposed = X[:, names.index("exposed")]
    for parent in ("year", "intervention", "year_post"):
        np.testing.assert_array_equal(X[:, names.index(f"exposed:{parent}")],
                                      exposed * X[:, names.index(parent)])
    np.testing.assert_array_equal(X[:, 0], 1.0)
    # each categorical row sets at most one of its dummies
    for col in CONFOUNDERS:
        idx = [k for k, c in enumerate(names) if c.startswith(col + "[")]
        assert X[:, idx].sum(axis=1).max() <= 1


def test_centered_columns_recomputed(desk):
    design, sim, _ = desk
    f = design.frame
    aware = f["area_id"].map(sim.truth["awareness_year"])
    year = f["interview_year"] - aware
    np.testing.assert_array_equal(f["year"], year)
    np.testing.assert_array_equal(f["intervention"], (year >= 0).astype(int))
    np.testing.assert_array_equal(f["year_post"], np.maximum(year, 0))


def test_layout_manifest_round_trip(desk):
    design, _, _ = desk
    lay = design.layout
    back = model.Layout.from_dict(json.loads(lay.to_json()))
    assert back == lay
    manifest = lay.to_dict()
    assert manifest["fixed_effect_prior_scale"] == "variance"
    assert manifest["priors"]["sum_to_zero_precision"] == 1e6


# -- linear predictor --------------------------------------------------------

def test_zero_parameters_give_half(desk):
    design, _, _ = desk
    mu = model.linear_predictor(ParameterVector.zeros(design.layout), design)
    np.testing.assert_array_equal(mu, 0.0)
    np.testing.assert_array_equal(model.inv_logit(mu), 0.5)


def test_intercept_only(desk):
    design, _, _ = desk
    p = ParameterVector.zeros(design.layout)
    p.beta[0] = -0.7
    np.testing.assert_allclose(model.linear_predictor(p, design), -0.7)


def test_linear_predictor_matches_naive(desk):
    design, _, _ = desk
    lay = design.layout
    rng = np.random.default_rng(4)
    p = ParameterVector.from_array(random_theta(rng, lay), lay)
    mu = model.linear_predictor(p, design)
    f = design.frame
    b = dict(zip(lay.fixed_effects, p.beta))
    for i in rng.choice(design.n, 40, replace=False):
        r = f.iloc[i]
        its = [1.0, r.year, r.intervention, r.year_post]
        val = sum(b[n] * v for n, v in zip(model.ITS_COLUMNS, its))
        val += r.exposed * sum(b[n] * v for n, v in zip(model.EXPOSURE_COLUMNS, its))
        for col in CONFOUNDERS:
            val += b.get(f"{col}[{r[col]}]", 0.0)
        val += p.gamma[lay.years.index(r.interview_year)] + p.delta[lay.areas.index(r.area_id)]
        assert mu[i] == pytest.approx(val, abs=1e-12)
        assert model.linear_predictor(p, design.row(i)) == pytest.approx(val, abs=1e-12)


def test_dimension_mismatch(desk):
    design, _, _ = desk
    with pytest.raises(ValidationError):
        model.linear_predictor(np.zeros(3), design)
    with pytest.raises(ValidationError):
        model.gradient(np.zeros(design.layout.n_params + 1), design)


# -- log posterior -----------------------------------------------------------

def mp_log_posterior(theta, d, priors=PriorSpec()):
    """Independent extended-precision evaluation of the log posterior."""
    lay = d.layout
    th = [mpmath.mpf(float(v)) for v in theta]
    beta, gamma = th[: lay.n_fixed], th[lay.gamma_slice]
    delta, sg, sd = th[lay.delta_slice], th[-2], th[-1]
    total = mpmath.mpf(0)
    for i in range(d.n):
        mu = sum(mpmath.mpf(float(x)) * b for x, b in zip(d.X[i], beta))
        mu += gamma[d.t_index[i]] + delta[d.l_index[i]]
        total += mpmath.mpf(float(d.weights[i])) * (int(d.outcomes[i]) * mu - mpmath.log1p(mpmath.exp(mu)))
    v = mpmath.mpf(priors.fixed_effect_variance)
    for b in beta[1:]:
        total += -b * b / (2 * v) - mpmath.log(2 * mpmath.pi * v) / 2
    lam = -mpmath.log(mpmath.mpf(priors.pc_alpha)) / priors.pc_u
    kappa = mpmath.mpf(priors.sum_to_zero_precision)
    for u, s in ((gamma, sg), (delta, sd)):
        r = len(u) - 1
        sig = mpmath.exp(s)
        total += sum(-x * x / (2 * sig * sig) for x in u) - r * s - r * mpmath.log(2 * mpmath.pi) / 2
        total += -kappa / 2 * sum(u) ** 2
        total += mpmath.log(lam) - lam * sig + s
    return total


def test_zero_parameters_loglik():
    rng = np.random.default_rng(0)
    d = random_toy(rng, n=25)
    lp = LogPosterior(d, weights=np.ones(25))
    terms = lp.terms(ParameterVector.zeros(d.layout).to_array())
    assert terms["loglik"] == pytest.approx(-25 * np.log(2), rel=1e-14)
    priors = sum(v for k, v in terms.items() if k != "loglik")
    assert lp.value(np.zeros(d.layout.n_params)) == pytest.approx(-25 * np.log(2) + priors)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_doubling_weights_doubles_loglik(seed):
    rng = np.random.default_rng(seed)
    d = random_toy(rng)
    theta = random_theta(rng, d.layout)
    one = LogPosterior(d).terms(theta)
    two = LogPosterior(d, weights=2 * d.weights).terms(theta)
    assert two["loglik"] == 2 * one["loglik"]
    assert {k: v for k, v in two.items() if k != "loglik"} == \
        {k: v for k, v in one.items() if k != "loglik"}


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_five_observation_toy_matches_extended_precision(seed):
    rng = np.random.default_rng(seed)
    d = random_toy(rng, n=5, p=3, n_years=2, n_areas=3)
    theta = random_theta(rng, d.layout, scale=1.5)
    got = LogPosterior(d).value(theta)
    want = float(mp_log_posterior(theta, d))
    assert got == pytest.approx(want, rel=1e-12, abs=1e-10)


def test_extreme_linear_predictor_stable():
    X = np.array([[1.0], [1.0]])
    d = toy_design(X, [1, 0])
    lp = LogPosterior(d)
    for b in (700.0, -700.0):
        theta = np.array([b, 0.0, 0.0, 0.0, 0.0])
        val = lp.value(theta)
        assert np.isfinite(val)
        want = float(mp_log_posterior(theta, d))
        assert val == pytest.approx(want, rel=1e-12)
        assert np.all(np.isfinite(lp.gradient(theta)))


def test_nonfinite_term_reported():
    d = toy_design(np.ones((2, 1)), [1, 0])
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError, match="loglik"):
        LogPosterior(d).value(np.array([np.inf, 0, 0, 0, 0]))


def test_negative_weights_rejected():
    d = toy_design(np.ones((2, 1)), [1, 0])
    with pytest.raises(ValidationError):
        LogPosterior(d, weights=np.array([1.0, -1.0]))


def central_difference(f, theta, h=1e-5):
    g = np.empty_like(theta)
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


@given(st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d = random_toy(rng)
    lp = LogPosterior(d)
    theta = random_theta(rng, d.layout)
    fd = central_difference(lp.value, theta)
    g = lp.gradient(theta)
    assert np.all(np.abs(g - fd) / np.maximum(np.abs(g), 1.0) < 1e-6)


@given(st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_hessian_matches_gradient_differences(seed):
    rng = np.random.default_rng(seed)
    d = random_toy(rng)
    lp = LogPosterior(d)
    theta = random_theta(rng, d.layout)
    H = lp.hessian(theta)
    fd = np.array([central_difference(lambda t: lp.gradient(t)[k], theta)
                   for k in range(len(theta))])
    np.testing.assert_allclose(H, fd, rtol=1e-5, atol=1e-4 * max(1.0, np.abs(H).max()))


def test_hessian_symmetric(desk):
    design, _, _ = desk
    theta = random_theta(np.random.default_rng(9), design.layout)
    H = model.hessian(theta, design)
    assert np.max(np.abs(H - H.T)) == 0.0


def test_prior_only_gradient_zero_at_origin(desk):
    design, _, _ = desk
    lp = LogPosterior(design, weights=np.zeros(design.n))
    for s in (-1.0, 0.0, 0.7):
        g = lp.gradient(np.r_[np.zeros(design.layout.n_latent), s, s])
        np.testing.assert_array_equal(g[: design.layout.n_latent], 0.0)


@given(st.integers(1, 40), st.floats(0.5, 30.0), st.floats(1.1, 3.0))
def test_prior_penalizes_growing_coefficients(k, b, factor):
    rng = np.random.default_rng(k)
    d = random_toy(rng, p=3)
    lp = LogPosterior(d, weights=np.zeros(d.n))
    j = 1 + k % 2
    theta = np.zeros(d.layout.n_params)
    theta[j] = b
    bigger = theta.copy()
    bigger[j] = b * factor
    assert lp.value(bigger) < lp.value(theta)


@given(st.floats(1e-9, 1 - 1e-9))
def test_logit_round_trip(p):
    assert abs(model.inv_logit(model.logit(p)) - p) <= 1e-12


def test_pc_prior_rate_and_tail():
    pri = PriorSpec()
    assert pri.pc_rate == pytest.approx(np.log(10.0), rel=1e-15)
    tail, _ = integrate.quad(lambda s: model.pc_prior_density(s, pri), 1.0, np.inf,
                             epsabs=1e-13, epsrel=1e-13)
    assert abs(tail - 0.1) < 1e-6
    total, _ = integrate.quad(lambda s: model.pc_prior_density(s, pri), 0.0, np.inf)
    assert total == pytest.approx(1.0, abs=1e-10)


def test_log_sigma_prior_is_transformed_exponential():
    pri = PriorSpec(pc_u=0.5, pc_alpha=0.05)
    for s in (-2.0, 0.0, 1.0):
        want = np.log(model.pc_prior_density(np.exp(s), pri)) + s
        assert model.pc_log_prior_log_sigma(s, pri) == pytest.approx(want, rel=1e-13)


def test_prior_spec_validation():
    with pytest.raises(ValidationError):
        PriorSpec(pc_alpha=1.5)
    with pytest.raises(ValidationError):
        PriorSpec(fixed_effect_variance=0)


def test_parameter_vector_round_trip(desk):
    design, _, _ = desk
    theta = random_theta(np.random.default_rng(1), design.layout)
    p = ParameterVector.from_array(theta, design.layout)
    np.testing.assert_array_equal(p.to_array(), theta)
    assert p.sigma_gamma == pytest.approx(np.exp(theta[-2]))
