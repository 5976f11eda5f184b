"""Synthetic cohorts with known parameters.

:func:`simulate` draws areas, rollout curves, persons and yearly outcomes
from the hierarchical ITS model and returns them in the same tabular form
the ingestion code reads, alongside a ground-truth record that fitting code
never looks at.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit

from .cohort import AGE_BANDS, CONFOUNDERS, GHQ_COLUMNS, RESPONSE_COLUMNS, StudyWindow, \
    load_dictionary
from .errors import ValidationError
from .intervention import RolloutSeries, awareness_month, month_year, rollout_to_frame
from .model import EXPOSURE_COLUMNS, ITS_COLUMNS, Layout

ITS_NAMES = ITS_COLUMNS + EXPOSURE_COLUMNS

DEFAULT_FREQUENCIES = {
    "education": [0.35, 0.45, 0.20],
    "ethnicity": [0.73, 0.05, 0.12, 0.06, 0.04],
    "marital_status": [0.45, 0.55],
    "sex": [0.47, 0.53],
}

DEFAULT_CONFOUNDER_EFFECTS = {
    "age_band": {"[25,35)": 0.10, "[35,45)": 0.15, "[45,55)": 0.10, "[55,65)": -0.10},
    "education": {"GCSE, A-level or equivalent": 0.15, "Below GCSE and other": 0.30},
    "ethnicity": {"Mixed": 0.20, "Asian": -0.10, "Black": 0.05, "Other": 0.10},
    "marital_status": {"Married or civil partnership": -0.30},
    "sex": {"Female": 0.30},
    "deprivation_decile": {str(k): -0.03 * (k - 1) for k in range(2, 11)},
    "ethnic_mix_quintile": {str(k): 0.02 * (k - 1) for k in range(2, 6)},
}

OTHER_STATUSES = {
    "employed full time": 0.58,
    "employed part time": 0.15,
    "self employed": 0.10,
    "full-time student": 0.04,
    "family care or home": 0.04,
    "retired": 0.02,
    "maternity leave": 0.015,
    "government training scheme": 0.005,
    "unpaid family business": 0.005,
    "apprenticeship": 0.01,
    "furlough": 0.01,
    "something else": 0.025,
}


@dataclass
class ScenarioConfig:
    """Everything needed to generate one synthetic dataset.

    ``beta`` holds the ITS and exposure coefficients by column name;
    ``confounder_effects`` maps each confounder to per-level shifts (the
    first declared level is the reference and is implicitly zero).
    """

    name: str = "CUSTOM"
    seed: int = 0
    n_areas: int = 30
    n_persons_per_area: int = 60
    study_years: tuple = (2012, 2021)
    beta: dict = field(default_factory=lambda: {"intercept": -1.66, "exposed": 1.0})
    confounder_effects: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFOUNDER_EFFECTS))
    sigma_gamma: float = 0.1
    sigma_delta: float = 0.3
    awareness_years: list | None = None
    awareness_range: tuple | None = None
    never_aware_areas: int = 0
    introduction_lead_months: tuple = (6, 36)
    growth_rate: float = 0.15
    instant_adoption: bool = False
    area_step_sd: float = 0.0
    category_frequencies: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_FREQUENCIES))
    baseline_age_range: tuple = (14.0, 56.0)
    at_risk_share: float = 0.3
    at_risk_unemployment: float = 0.4
    base_unemployment: float = 0.03
    lifetime_sick_rate: float = 0.02
    absent_wave1_rate: float = 0.03
    base_weight_sd: float = 0.2
    response_intercept: float = 1.5
    response_effects: dict = field(default_factory=lambda: {
        "sex": {"Female": 0.3}, "education": {"Below GCSE and other": -0.4},
        "ethnicity": {"Asian": -0.3, "Black": -0.3},
    })
    missing_wave_rate: float = 0.3

    def __post_init__(self):
        if self.seed is None:
            raise ValidationError("scenario seed is mandatory")
        if self.n_areas <= 0 or self.n_persons_per_area <= 0:
            raise ValidationError("n_areas and n_persons_per_area must be positive")
        start, end = self.study_years
        if end <= start:
            raise ValidationError("study_years must span at least two years")
        if self.sigma_gamma < 0 or self.sigma_delta < 0:
            raise ValidationError("random-effect SDs must be nonnegative")
        if self.awareness_years is not None:
            if len(self.awareness_years) != self.n_areas:
                raise ValidationError("awareness_years needs one entry per area")
            for y in self.awareness_years:
                if y is not None and not start <= y <= end:
                    raise ValidationError(f"configured awareness year {y} outside study window")
        lo, hi = self.awareness_range or (start + 2, end - 2)
        if not (start <= lo <= hi <= end):
            raise ValidationError(f"awareness range {lo}..{hi} outside study window")
        self.study_years = tuple(self.study_years)

    @property
    def window(self):
        return StudyWindow(*self.study_years)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        return cls(**raw)


@dataclass
class SimulatedData:
    responses: pd.DataFrame
    rollout: list
    areas: pd.DataFrame
    truth: dict

    def write(self, out_dir):
        """Write the four dataset files; returns their paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "responses": out / "responses.csv",
            "rollout": out / "rollout.csv",
            "areas": out / "areas.csv",
            "truth": out / "truth.json",
        }
        self.responses.to_csv(paths["responses"], index=False, float_format="%.10g",
                              lineterminator="\n")
        rollout_to_frame(self.rollout).to_csv(paths["rollout"], index=False, lineterminator="\n")
        self.areas.to_csv(paths["areas"], index=False, float_format="%.10g", lineterminator="\n")
        paths["truth"].write_text(json.dumps(self.truth, indent=2, sort_keys=True) + "\n")
        return paths


def _rank_groups(scores, n_groups):
    order = np.argsort(-np.asarray(scores), kind="stable")
    rank = np.empty(len(scores), dtype=int)
    rank[order] = np.arange(len(scores))
    return rank * n_groups // len(scores) + 1


def _month_index(year, month, origin_year):
    return (year - origin_year) * 12 + (month - 1)


def _rollout_counts(rng, cfg, aware_year, origin_year, n_months):
    """Monthly counts whose 25% crossing falls in ``aware_year``."""
    total = int(rng.integers(2_000, 20_000))
    if aware_year is None:
        return np.zeros(n_months, dtype=np.int64)
    target = _month_index(aware_year, int(rng.integers(4, 10)), origin_year)
    if cfg.instant_adoption:
        counts = np.zeros(n_months, dtype=np.int64)
        counts[target:] = total
        return counts
    m = np.arange(n_months)
    # Late crossings need a steep enough curve to still start below 25%.
    r = max(cfg.growth_rate, 2.0 * np.log(4.0) / max(n_months - 1 - target, 1))
    # Logistic curve normalized to 1 at the final month, solved so that it
    # equals 0.25 at month ``target``.
    g_end = lambda c: expit(r * (n_months - 1 - c))
    lo, hi = -600.0, 600.0
    for _ in range(200):
        c = 0.5 * (lo + hi)
        val = expit(r * (target - c)) / g_end(c)
        lo, hi = (lo, c) if val < 0.25 else (c, hi)
    g = expit(r * (m - c)) / g_end(c)
    counts = np.round(total * g).astype(np.int64)
    counts[-1] = total
    lead = int(rng.integers(*cfg.introduction_lead_months))
    counts[m < target - lead] = 0
    return counts


def _draw_levels(rng, levels, probs, size):
    probs = np.asarray(probs, dtype=float)
    return np.asarray(levels, dtype=object)[rng.choice(len(levels), size=size, p=probs / probs.sum())]


def simulate(config: ScenarioConfig) -> SimulatedData:
    """Generate one dataset from ``config``; bit-reproducible per seed."""
    cfg = config
    dictionary = load_dictionary()
    levels = dictionary.levels
    window = cfg.window
    years = np.arange(window.start, window.end + 1)
    n_years = len(years)
    root = np.random.SeedSequence(cfg.seed)
    global_ss, *area_ss = root.spawn(cfg.n_areas + 1)
    rng = np.random.default_rng(global_ss)

    area_ids = [f"A{k + 1:03d}" for k in range(cfg.n_areas)]
    imd = np.round(rng.uniform(5.0, 60.0, cfg.n_areas), 4)
    minority = np.round(rng.beta(1.2, 4.0, cfg.n_areas), 4)
    decile = _rank_groups(imd, 10) if cfg.n_areas >= 10 else np.ones(cfg.n_areas, int)
    quintile = _rank_groups(minority, 5) if cfg.n_areas >= 5 else np.ones(cfg.n_areas, int)

    lo, hi = cfg.awareness_range or (window.start + 2, window.end - 2)
    if cfg.awareness_years is not None:
        aware = list(cfg.awareness_years)
    else:
        aware = [int(y) for y in rng.integers(lo, hi + 1, cfg.n_areas)]
        for k in range(cfg.never_aware_areas):
            aware[cfg.n_areas - 1 - k] = None

    gamma = rng.normal(0.0, cfg.sigma_gamma, n_years) if cfg.sigma_gamma > 0 else np.zeros(n_years)
    delta = rng.normal(0.0, cfg.sigma_delta, cfg.n_areas) if cfg.sigma_delta > 0 else np.zeros(cfg.n_areas)
    area_step = (rng.normal(0.0, cfg.area_step_sd, cfg.n_areas) if cfg.area_step_sd > 0
                 else np.zeros(cfg.n_areas))

    origin_year = window.start - 3
    n_months = (window.end - origin_year + 1) * 12
    start_month = f"{origin_year:04d}-01"

    b = {name: float(cfg.beta.get(name, 0.0)) for name in ITS_NAMES}
    unknown = set(cfg.beta) - set(ITS_NAMES)
    if unknown:
        raise ValidationError(f"unknown ITS coefficients {sorted(unknown)}")
    effects = {col: {str(k): float(v) for k, v in cfg.confounder_effects.get(col, {}).items()}
               for col in CONFOUNDERS}
    statuses = list(OTHER_STATUSES)
    status_p = np.array(list(OTHER_STATUSES.values()))
    status_p /= status_p.sum()

    rollout, rows = [], []
    for a in range(cfg.n_areas):
        arng = np.random.default_rng(area_ss[a])
        counts = _rollout_counts(arng, cfg, aware[a], origin_year, n_months)
        series = RolloutSeries.from_counts(area_ids[a], start_month, counts)
        crossed = awareness_month(series, 25.0)
        got = None if crossed is None else month_year(crossed)
        if got != aware[a]:
            raise ValidationError(f"rollout for {area_ids[a]} crosses in {got}, expected {aware[a]}")
        rollout.append(series)

        n = cfg.n_persons_per_area
        freqs = cfg.category_frequencies
        person = {
            col: _draw_levels(arng, levels[col], freqs.get(col, np.ones(len(levels[col]))), n)
            for col in ("education", "ethnicity", "marital_status", "sex")
        }
        age0 = arng.uniform(*cfg.baseline_age_range, n)
        at_risk = arng.random(n) < cfg.at_risk_share
        base_w = np.exp(arng.normal(0.0, cfg.base_weight_sd, n)) if cfg.base_weight_sd > 0 else np.ones(n)
        resp_lin = np.full(n, cfg.response_intercept)
        for col, eff in cfg.response_effects.items():
            resp_lin += np.array([eff.get(v, 0.0) for v in person[col]])
        complete = arng.random(n) < expit(resp_lin)
        absent1 = arng.random(n) < cfg.absent_wave1_rate

        for i in range(n):
            pattern = np.ones(n_years, dtype=bool)
            if not complete[i] and n_years > 1:
                miss = arng.random(n_years - 1) < cfg.missing_wave_rate
                if not miss.any():
                    miss[arng.integers(n_years - 1)] = True
                pattern[1:] = ~miss
            if absent1[i]:
                pattern[0] = False
            pattern_str = "".join("1" if p else "0" for p in pattern)
            pid = f"{area_ids[a]}-P{i + 1:04d}"
            for k, year in enumerate(years):
                # Draws happen for every wave so one person's stream does not
                # depend on which waves they answered.
                u_status, u_sick, u_out = arng.random(3)
                other = statuses[arng.choice(len(statuses), p=status_p)]
                ghq_u = arng.random(N_ITEMS_DRAW)
                if not pattern[k]:
                    continue
                age = float(np.round(age0[i] + (year - window.start), 2))
                band = _age_band(age)
                rate = cfg.at_risk_unemployment if at_risk[i] else cfg.base_unemployment
                if u_sick < cfg.lifetime_sick_rate:
                    status = dictionary.excluded_status
                elif u_status < rate:
                    status = dictionary.exposed_status
                else:
                    status = other
                exposed = float(status == dictionary.exposed_status)
                anchor = window.end + 1 if aware[a] is None else aware[a]
                cy = year - anchor
                iv = float(cy >= 0)
                yp = max(cy, 0)
                mu = (b["intercept"] + b["year"] * cy + b["intervention"] * iv + b["year_post"] * yp
                      + exposed * (b["exposed"] + b["exposed:year"] * cy
                                   + (b["exposed:intervention"] + area_step[a]) * iv
                                   + b["exposed:year_post"] * yp)
                      + gamma[k] + delta[a])
                profile = {"age_band": band, "education": person["education"][i],
                           "ethnicity": person["ethnicity"][i],
                           "marital_status": person["marital_status"][i],
                           "sex": person["sex"][i],
                           "deprivation_decile": str(decile[a]),
                           "ethnic_mix_quintile": str(quintile[a])}
                mu += sum(effects[col].get(str(v), 0.0) for col, v in profile.items() if v is not None)
                outcome = int(u_out < expit(mu))
                items = _ghq_items(outcome, ghq_u)
                rows.append([pid, area_ids[a], int(year), *items, status, age,
                             person["education"][i], person["ethnicity"][i],
                             person["marital_status"][i], person["sex"][i],
                             float(np.round(base_w[i], 6)), pattern_str])

    responses = pd.DataFrame(rows, columns=RESPONSE_COLUMNS)
    areas = pd.DataFrame({"area_id": area_ids, "imd_score": imd,
                          "ethnic_minority_proportion": minority})
    truth = {
        "scenario": cfg.name,
        "seed": cfg.seed,
        "config": _jsonable(cfg.to_dict()),
        "beta": {**b, **{f"{col}[{lv}]": v for col, eff in effects.items() for lv, v in eff.items()}},
        "gamma": {str(y): float(g) for y, g in zip(years, gamma)},
        "delta": {aid: float(d) for aid, d in zip(area_ids, delta)},
        "area_step": {aid: float(s) for aid, s in zip(area_ids, area_step)},
        "sigma_gamma": cfg.sigma_gamma,
        "sigma_delta": cfg.sigma_delta,
        "awareness_year": {aid: y for aid, y in zip(area_ids, aware)},
        "deprivation_decile": {aid: int(d) for aid, d in zip(area_ids, decile)},
        "ethnic_mix_quintile": {aid: int(q) for aid, q in zip(area_ids, quintile)},
    }
    return SimulatedData(responses=responses, rollout=rollout, areas=areas, truth=truth)


N_ITEMS_DRAW = 1 + 2 * len(GHQ_COLUMNS)


def _age_band(age):
    for lo, hi in AGE_BANDS:
        if lo <= age < hi:
            return f"[{lo},{hi})"
    return None


def _ghq_items(outcome, u):
    """GHQ responses whose caseness score lands on the correct side of 4."""
    n = len(GHQ_COLUMNS)
    score = 4 + int(u[0] * 9) if outcome else int(u[0] * 4)
    order = np.argsort(u[1: n + 1], kind="stable")
    case = np.zeros(n, dtype=bool)
    case[order[:score]] = True
    low_high = u[n + 1:] < 0.5
    return [int(2 + h) if c else int(h) for c, h in zip(case, low_high)]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# Ground truth in model coordinates


def truth_vector(truth: dict, layout: Layout) -> np.ndarray:
    """True parameters laid out like the model, with random effects centered.

    The fitted model constrains gamma and delta to sum to zero, so the means
    of the drawn effects are moved into the intercept.
    """
    gamma = np.array([truth["gamma"][str(y)] for y in layout.years])
    delta = np.array([truth["delta"][a] for a in layout.areas])
    beta = np.array([truth["beta"].get(name, 0.0) for name in layout.fixed_effects])
    beta[0] += gamma.mean() + delta.mean()
    return np.concatenate([beta, gamma - gamma.mean(), delta - delta.mean(),
                           [np.log(max(truth["sigma_gamma"], 1e-12)),
                            np.log(max(truth["sigma_delta"], 1e-12))]])


def true_linear_predictor(truth: dict, frame: pd.DataFrame) -> np.ndarray:
    """Per-observation true ``mu``, recomputed from the truth record.

    ``frame`` is a design frame (observation columns plus centered time).
    Area-varying step effects are included, so this is exact even where the
    fitted model is misspecified.
    """
    b = truth["beta"]
    cy = frame["year"].to_numpy(float)
    iv = frame["intervention"].to_numpy(float)
    yp = frame["year_post"].to_numpy(float)
    ex = frame["exposed"].to_numpy(float)
    step = frame["area_id"].map(truth.get("area_step", {})).fillna(0.0).to_numpy(float)
    mu = (b["intercept"] + b["year"] * cy + b["intervention"] * iv + b["year_post"] * yp
          + ex * (b["exposed"] + b["exposed:year"] * cy + (b["exposed:intervention"] + step) * iv
                  + b["exposed:year_post"] * yp))
    mu = mu + frame["interview_year"].astype(str).map(truth["gamma"]).to_numpy(float)
    mu = mu + frame["area_id"].map(truth["delta"]).to_numpy(float)
    for col in CONFOUNDERS:
        mu = mu + frame[col].map(lambda v, c=col: b.get(f"{c}[{v}]", 0.0)).to_numpy(float)
    return mu


# ---------------------------------------------------------------------------
# Scenario library


def scenario_library(seed: int = 0) -> dict:
    """Named scenarios.

    NULL has no policy effect. PAPER_LIKE is calibrated so the national
    standardised change is about 0.15. HETEROGENEOUS adds area-varying step
    effects and wider spatial variation. DESK_ORACLE is a small balanced
    instance for comparing the Laplace fit against MCMC.
    """
    null = ScenarioConfig(name="NULL", seed=seed, beta={"intercept": -1.66, "exposed": 1.0})
    paper_like = ScenarioConfig(
        name="PAPER_LIKE", seed=seed,
        beta={"intercept": -1.66, "year": -0.01, "intervention": 0.05, "year_post": 0.01,
              "exposed": 1.0, "exposed:year": 0.03, "exposed:intervention": 0.15,
              "exposed:year_post": -0.02},
    )
    hetero = ScenarioConfig(
        name="HETEROGENEOUS", seed=seed, sigma_delta=0.5, area_step_sd=0.5,
        beta=dict(paper_like.beta),
    )
    oracle = ScenarioConfig(
        name="DESK_ORACLE", seed=seed, n_areas=10, n_persons_per_area=20,
        study_years=(2016, 2021), awareness_range=(2017, 2020),
        beta={"intercept": -0.8, "year": 0.02, "intervention": 0.1, "year_post": 0.02,
              "exposed": 0.6, "exposed:year": 0.03, "exposed:intervention": 0.3,
              "exposed:year_post": -0.02},
        sigma_gamma=0.2, sigma_delta=0.3,
        category_frequencies={
            "education": [1, 1, 1], "ethnicity": [1, 1, 1, 1, 1],
            "marital_status": [1, 1], "sex": [1, 1],
        },
        baseline_age_range=(16.0, 59.0), at_risk_share=0.6, at_risk_unemployment=0.5,
        lifetime_sick_rate=0.0, absent_wave1_rate=0.0, response_intercept=3.0,
    )
    return {s.name: s for s in (null, paper_like, hetero, oracle)}


def scenario(name: str, seed: int = 0, **overrides) -> ScenarioConfig:
    lib = scenario_library(seed)
    if name not in lib:
        raise ValidationError(f"unknown scenario {name!r}; choose from {sorted(lib)}")
    cfg = lib[name]
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ValidationError(f"unknown scenario field {key!r}")
        setattr(cfg, key, value)
    cfg.__post_init__()
    return cfg
