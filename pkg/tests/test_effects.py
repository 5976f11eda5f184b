import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, logit

from policy_its import effects, synth
from policy_its.effects import EMPTY, LinearPredictor, ProfileQuery
from policy_its.errors import ValidationError


def grid_frame(rng, n=400, areas=("A", "B", "C")):
    year = rng.integers(-4, 4, n)
    return pd.DataFrame({
        "area_id": rng.choice(areas, n),
        "year": year,
        "intervention": (year >= 0).astype(int),
        "exposed": rng.integers(0, 2, n),
        "sex": rng.choice(["Male", "Female"], n),
        "deprivation_decile": rng.integers(1, 11, n),
        "weight": rng.uniform(0.5, 2.0, n),
    })


def predictor(frame, mu):
    return LinearPredictor(frame, mu=mu)


# -- marginal_mu -------------------------------------------------------------

def test_single_observation_stratum():
    rng = np.random.default_rng(0)
    f = grid_frame(rng)
    f.loc[7, "sex"] = "Other"
    mu = rng.standard_normal((20, len(f)))
    s = effects.marginal_mu(predictor(f, mu), ProfileQuery().constrain("sex", "Other"))
    assert s.n_observations == 1
    np.testing.assert_allclose(s.values, mu[:, 7], rtol=1e-15)


@given(st.floats(-5, 5), st.integers(0, 1000))
def test_constant_mu_any_weights(c, seed):
    rng = np.random.default_rng(seed)
    f = grid_frame(rng, n=50)
    f["weight"] = rng.uniform(0.01, 10, len(f))
    s = effects.marginal_mu(predictor(f, np.full((3, len(f)), c)), ProfileQuery(exposed=1))
    np.testing.assert_allclose(s.values, c, rtol=1e-12, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_random_stratum_matches_naive_mean(seed):
    rng = np.random.default_rng(seed)
    f = grid_frame(rng, n=120)
    mu = rng.standard_normal((5, len(f)))
    q = ProfileQuery(years=(-2, 1), exposed=int(rng.integers(0, 2))).constrain("sex", "Female")
    s = effects.marginal_mu(predictor(f, mu), q)
    sel = [i for i in range(len(f)) if -2 <= f.year[i] <= 1 and f.exposed[i] == q.exposed
           and f.sex[i] == "Female"]
    assert s.n_observations == len(sel)
    for n in range(5):
        num = sum(f.weight[i] * mu[n, i] for i in sel)
        den = sum(f.weight[i] for i in sel)
        assert s.values[n] == pytest.approx(num / den, rel=1e-12)


def test_latent_and_explicit_mu_agree():
    rng = np.random.default_rng(2)
    f = grid_frame(rng, n=60)
    Z = rng.standard_normal((60, 4))
    x = rng.standard_normal((7, 4))
    q = ProfileQuery(period="after", exposed=0)
    a = effects.marginal_mu(LinearPredictor(f, latent=x, Z=Z), q).values
    b = effects.marginal_mu(LinearPredictor(f, mu=x @ Z.T), q).values
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_empty_stratum_reported():
    rng = np.random.default_rng(0)
    f = grid_frame(rng)
    s = effects.marginal_mu(predictor(f, np.zeros((2, len(f)))), ProfileQuery(years=(50, 60)))
    assert s.empty and s.n_observations == 0
    assert "year in [50, 60]" in s.reason


def test_probability_aggregation():
    f = pd.DataFrame({"year": [0, 0], "intervention": [1, 1], "exposed": [1, 1],
                      "area_id": ["A", "A"], "weight": [1.0, 3.0]})
    mu = np.array([[logit(0.2), logit(0.6)]])
    s = effects.marginal_mu(predictor(f, mu), ProfileQuery(), aggregation="probability")
    assert expit(s.values[0]) == pytest.approx(0.25 * 0.2 + 0.75 * 0.6)
    with pytest.raises(ValidationError):
        effects.marginal_mu(predictor(f, mu), ProfileQuery(), aggregation="median")


def test_query_validation():
    with pytest.raises(ValidationError):
        ProfileQuery(period="during")
    with pytest.raises(ValidationError):
        ProfileQuery(exposed=2)
    f = grid_frame(np.random.default_rng(0))
    with pytest.raises(ValidationError):
        ProfileQuery(levels={"shoe_size": 9}).mask(f)


# -- prevalence and ratios ---------------------------------------------------

def test_prevalence_examples():
    assert effects.prevalence(np.zeros(100)).median == 0.5
    s = effects.prevalence(np.full(50, logit(0.3)))
    assert (s.lower, s.median, s.upper) == pytest.approx((0.3, 0.3, 0.3))


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=200))
def test_summary_ordered(values):
    s = effects.prevalence(np.array(values))
    assert s.lower <= s.median <= s.upper


def test_summary_uses_type7_percentiles():
    x = np.arange(1.0, 11.0)
    s = effects.summarize(x)
    # type 7: h = (n - 1) p, interpolate between order statistics
    assert s.lower == pytest.approx(1 + 9 * 0.025)
    assert s.median == pytest.approx(5.5)
    assert s.upper == pytest.approx(1 + 9 * 0.975)


@pytest.mark.parametrize("pe, pc, ratio", [(42.73, 15.93, 2.68), (59.28, 16.08, 3.69)])
def test_reference_ratio_examples(pe, pc, ratio):
    s = effects.exposed_control_ratio([pe / 100], [pc / 100])
    assert round(s.median, 2) == ratio


def test_equal_prevalences_ratio_one():
    p = np.random.default_rng(0).uniform(0.1, 0.9, 100)
    s = effects.exposed_control_ratio(p, p)
    assert (s.lower, s.median, s.upper) == (1.0, 1.0, 1.0)


@given(st.integers(0, 10_000))
def test_ratio_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pe, pc = rng.uniform(0.05, 0.95, (2, 101))
    perm = rng.permutation(101)
    assert effects.exposed_control_ratio(pe, pc) == effects.exposed_control_ratio(pe[perm], pc[perm])


# -- rho ---------------------------------------------------------------------

def test_rho_zero_when_nothing_changes():
    mu = np.array([-1.0, -0.5, 0.3])
    rd = effects.rho_draws(mu, mu, mu + 0.2, mu + 0.2)
    np.testing.assert_allclose(rd.rho, 0.0, atol=1e-15)


def test_rho_hand_evaluated():
    rd = effects.rho_draws([logit(0.55)], [0.0], [-1.3], [-1.3])
    assert rd.rho[0] == pytest.approx(0.10, rel=1e-12)


def test_rho_zero_control_before_excluded():
    rd = effects.rho_draws([0.1, 0.2, 0.3], [-1.0, -1.0, -1.0], [-0.5, -0.5, -0.5], [-1.0, 0.0, -2.0])
    assert rd.excluded == 1 and len(rd.rho) == 2


def test_rho_additive_variant():
    rd = effects.rho_draws([0.0], [-1.0], [-0.5], [-0.8], adjustment="additive")
    p_tilde = expit(-1.0 + -0.5 - -0.8)
    assert rd.rho[0] == pytest.approx((0.5 - p_tilde) / p_tilde)
    with pytest.raises(ValidationError):
        effects.rho_draws([0.0], [0.0], [0.0], [1.0], adjustment="odds")


mus = st.lists(st.floats(-4, 4).filter(lambda v: abs(v) > 1e-3), min_size=4, max_size=4)


@given(st.lists(mus, min_size=1, max_size=30))
def test_rho_sign_invariance(rows):
    ea, eb, ca, cb = np.array(rows).T
    rd = effects.rho_draws(ea, eb, ca, cb)
    np.testing.assert_array_equal(rd.rho > 0, rd.p_exposed_after > rd.p_tilde_exposed_before)


@given(st.lists(mus, min_size=1, max_size=30))
def test_identical_control_gives_unadjusted_change(rows):
    ea, eb, c, _ = np.array(rows).T
    rd = effects.rho_draws(ea, eb, c, c)
    np.testing.assert_allclose(rd.rho, (expit(ea) - expit(eb)) / expit(eb), rtol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_rho_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(-1, 0.3, (4, 99))
    perm = rng.permutation(99)
    a = effects.rho_draws(*m).summary()
    b = effects.rho_draws(*m[:, perm]).summary()
    assert a == b


def test_standardised_change_reports_strata():
    rng = np.random.default_rng(1)
    f = grid_frame(rng)
    mu = rng.normal(-1, 0.1, (30, len(f)))
    cell = effects.standardised_change(predictor(f, mu))
    assert set(cell.n) == {"EA", "EB", "CA", "CB"}
    assert sum(cell.n.values()) == len(f)
    assert cell.rho.lower <= cell.rho.median <= cell.rho.upper
    row = cell.row()
    for k in ("n_EA", "n_EB", "n_CA", "n_CB", "rho_median", "ratio_median", "status"):
        assert k in row


def test_standardised_change_empty_stratum():
    rng = np.random.default_rng(1)
    f = grid_frame(rng)
    f.loc[(f.area_id == "A") & (f.exposed == 1), "intervention"] = 0
    cell = effects.standardised_change(predictor(f, np.zeros((5, len(f)))),
                                       ProfileQuery(areas=("A",)))
    assert cell.status == EMPTY and cell.n["EA"] == 0
    assert "exposed" in cell.reason and np.isnan(cell.rho.median)


def test_harmful_step_gives_positive_rho(small_fit):
    fitted, design, _ = small_fit
    cell = effects.standardised_change(LinearPredictor.from_fitted(fitted, design))
    assert cell.rho.median > 0


# -- sweeps ------------------------------------------------------------------

def test_single_level_sweep_equals_marginal():
    rng = np.random.default_rng(4)
    f = grid_frame(rng)
    f["sex"] = "Male"
    mu = rng.normal(-1, 0.2, (40, len(f)))
    pred = predictor(f, mu)
    table = effects.profile_sweep(pred, ["sex"])
    assert len(table) == 1
    assert table.rho_median[0] == effects.standardised_change(pred).rho.median


def test_joint_sweep_cell_count():
    rng = np.random.default_rng(4)
    f = grid_frame(rng, n=300)
    f["quintile"] = rng.integers(1, 6, len(f))
    pred = predictor(f, rng.normal(-1, 0.2, (10, len(f))))
    table = effects.profile_sweep(pred, ["deprivation_decile", "quintile"], joint=True,
                                  levels={"deprivation_decile": range(1, 11), "quintile": range(1, 6)})
    assert len(table) == 50
    assert (table.status == EMPTY).any() and (table.status == "ok").any()
    empty = table[table.status == EMPTY]
    assert empty.rho_median.isna().all() and empty.reason.notna().all()
    # populated cells first, in descending median order
    ok = table.status.to_numpy() == "ok"
    assert ok[: ok.sum()].all()
    assert np.all(np.diff(table.rho_median[ok]) <= 0)


def test_declared_but_absent_level_is_empty():
    rng = np.random.default_rng(4)
    f = grid_frame(rng)
    pred = predictor(f, rng.normal(-1, 0.2, (10, len(f))))
    table = effects.profile_sweep(pred, ["sex"], levels={"sex": ["Male", "Female", "Other"]})
    assert table.set_index("level").loc["Other", "status"] == EMPTY


def test_concentrated_effect_tops_table(small_fit):
    # Generate outcomes' linear predictor with the step confined to one
    # category, then check the sweep ranks that category first.
    _, design, sim = small_fit
    f = design.frame
    mu = synth.true_linear_predictor(sim.truth, f)
    boost = 0.8 * ((f["ethnicity"] == "Asian") & (f["exposed"] == 1) & (f["intervention"] == 1))
    rng = np.random.default_rng(0)
    draws = mu + boost.to_numpy(float) + 0.02 * rng.standard_normal((200, len(f)))
    table = effects.profile_sweep(predictor(f, draws), ["ethnicity", "sex", "education"])
    assert table.iloc[0]["dimension"] == "ethnicity"
    assert table.iloc[0]["level"] == "Asian"


def test_area_sweep_carries_empty(small_fit):
    fitted, design, _ = small_fit
    f = design.frame.copy()
    target = f["area_id"].iloc[0]
    keep = ~((f["area_id"] == target) & (f["exposed"] == 1) & (f["intervention"] == 1))
    pred = LinearPredictor(f[keep], latent=fitted.draws[:, : fitted.layout.n_latent],
                           Z=design.Z[keep.to_numpy()])
    table = effects.area_sweep(pred).set_index("area_id")
    assert table.loc[target, "status"] == EMPTY
    assert table.loc[target, "n_EA"] == 0
    assert (table.drop(index=target).status == "ok").all()
    national = effects.standardised_change(pred)
    assert national.status == "ok"


def test_sort_cells_puts_empty_last():
    q = ProfileQuery()
    cells = [effects.EffectSummary("e", q, {}, EMPTY, "none"),
             effects.EffectSummary("lo", q, {}, rho=effects.Summary(0, 0.1, 0.2)),
             effects.EffectSummary("hi", q, {}, rho=effects.Summary(0, 0.5, 0.9))]
    assert [c.label for c in effects.sort_cells(cells)] == ["hi", "lo", "e"]


# -- trend table -------------------------------------------------------------

def test_trend_table_rows_and_ratio(small_fit):
    fitted, design, _ = small_fit
    pred = LinearPredictor.from_fitted(fitted, design)
    table, long = effects.trend_table(pred, return_draws=True)
    years = sorted(design.frame["year"].unique())
    assert list(table.period) == [f"year={y}" for y in years] + ["before", "after", "all"]
    for _, row in table[table.status == "ok"].iterrows():
        d = long[long.period == row.period]
        s = effects.summarize(d.prevalence_exposed / d.prevalence_control)
        assert (row.ratio_lower, row.ratio_median, row.ratio_upper) == \
            pytest.approx((s.lower, s.median, s.upper), rel=1e-12)
        assert row.exposed_lower <= row.exposed_median <= row.exposed_upper
    all_row = table.set_index("period").loc["all"]
    assert all_row.n_exposed + all_row.n_control == len(design.frame)


def test_trend_table_empty_year():
    rng = np.random.default_rng(0)
    f = grid_frame(rng)
    f = f[~((f.year == 3) & (f.exposed == 1))]
    table = effects.trend_table(predictor(f, np.zeros((4, len(f)))))
    row = table.set_index("period").loc["year=3"]
    assert row.status == EMPTY and np.isnan(row.exposed_median) and row.n_exposed == 0
