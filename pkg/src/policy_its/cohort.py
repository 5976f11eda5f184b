"""Cohort derivation.

Turns person-year survey rows into analysis observations: a binary distress
outcome from the GHQ-12 items, an exposure flag from employment status, a
fully populated confounder profile (including area deprivation deciles and
ethnic-mix quintiles) and a nonresponse-adjusted survey weight.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from .errors import ValidationError

log = logging.getLogger(__name__)

N_GHQ_ITEMS = 12
GHQ_COLUMNS = [f"ghq_{k}" for k in range(1, N_GHQ_ITEMS + 1)]
DISTRESS_THRESHOLD = 4
AGE_BANDS = ((16, 25), (25, 35), (35, 45), (45, 55), (55, 65))

INDIVIDUAL_CONFOUNDERS = ("age_band", "education", "ethnicity", "marital_status", "sex")
AREA_CONFOUNDERS = ("deprivation_decile", "ethnic_mix_quintile")
CONFOUNDERS = INDIVIDUAL_CONFOUNDERS + AREA_CONFOUNDERS

RESPONSE_COLUMNS = (
    ["person_id", "area_id", "interview_year"]
    + GHQ_COLUMNS
    + ["employment_status", "age", "education", "ethnicity", "marital_status", "sex",
       "base_weight", "response_pattern"]
)
AREA_COLUMNS = ["area_id", "imd_score", "ethnic_minority_proportion"]

OBSERVATION_COLUMNS = (
    ["person_id", "area_id", "interview_year", "outcome", "exposed"]
    + list(CONFOUNDERS)
    + ["weight"]
)


@dataclass(frozen=True)
class StudyWindow:
    """Inclusive range of calendar years covered by the study."""

    start: int
    end: int

    def __post_init__(self):
        if self.end < self.start:
            raise ValidationError(f"study window end {self.end} precedes start {self.start}")

    def contains(self, year):
        return self.start <= year <= self.end

    @property
    def years(self):
        return list(range(self.start, self.end + 1))


@dataclass(frozen=True)
class DataDictionary:
    """Declared level sets for every categorical variable."""

    levels: Mapping[str, list]
    employment_status: list[str]
    exposed_status: str = "unemployed"
    excluded_status: str = "life-time sick or disabled"

    def __post_init__(self):
        if len(self.employment_status) != 14:
            raise ValidationError("employment_status must declare 14 codes")
        for code in (self.exposed_status, self.excluded_status):
            if code not in self.employment_status:
                raise ValidationError(f"{code!r} is not a declared employment status")
        missing = [name for name in CONFOUNDERS if name not in self.levels]
        if missing:
            raise ValidationError(f"data dictionary lacks level sets for {missing}")

    def to_dict(self):
        return {
            "levels": {k: list(v) for k, v in self.levels.items()},
            "employment_status": list(self.employment_status),
            "exposed_status": self.exposed_status,
            "excluded_status": self.excluded_status,
        }

    @classmethod
    def from_dict(cls, raw):
        return cls(
            levels={k: list(v) for k, v in raw["levels"].items()},
            employment_status=list(raw["employment_status"]),
            exposed_status=raw.get("exposed_status", "unemployed"),
            excluded_status=raw.get("excluded_status", "life-time sick or disabled"),
        )


def load_dictionary(path=None) -> DataDictionary:
    """Load a data dictionary; the bundled one is used when ``path`` is None."""
    if path is None:
        text = resources.files("policy_its").joinpath("data/dictionary.json").read_text()
    else:
        text = Path(path).read_text()
    return DataDictionary.from_dict(json.loads(text))


@dataclass(frozen=True)
class RawResponse:
    """One person-year survey record as ingested."""

    person_id: str
    area_id: str
    interview_year: int
    ghq_items: tuple
    employment_status: str
    age: float
    education: str
    ethnicity: str
    marital_status: str
    sex: str
    base_weight: float
    responded_all_waves: tuple

    def __post_init__(self):
        _check_ghq(self.ghq_items)
        if self.base_weight < 0:
            raise ValidationError(f"base_weight must be nonnegative, got {self.base_weight}")


@dataclass(frozen=True)
class AreaAttributes:
    area_id: str
    imd_score: float
    ethnic_minority_proportion: float

    def __post_init__(self):
        if not np.isfinite(self.imd_score):
            raise ValidationError(f"area {self.area_id}: IMD score must be finite")
        if not 0.0 <= self.ethnic_minority_proportion <= 1.0:
            raise ValidationError(
                f"area {self.area_id}: ethnic_minority_proportion "
                f"{self.ethnic_minority_proportion} outside [0, 1]"
            )


# ---------------------------------------------------------------------------
# Outcome, exposure and banding


def _check_ghq(items):
    items = list(items)
    if len(items) != N_GHQ_ITEMS:
        raise ValidationError(f"expected {N_GHQ_ITEMS} GHQ items, got {len(items)}")
    for k, v in enumerate(items):
        if v not in (0, 1, 2, 3) or isinstance(v, bool):
            raise ValidationError(f"GHQ item {k} has value {v!r}; expected an integer in 0..3")
    return items


def dichotomize_ghq(ghq_items: Sequence[int]) -> int:
    """Return 1 when the GHQ-12 caseness score is at least 4, else 0.

    Each item (0..3) is first collapsed to a caseness point: 0 and 1 score 0,
    2 and 3 score 1, giving a 0..12 total.
    """
    items = _check_ghq(ghq_items)
    score = sum(1 for v in items if v >= 2)
    return int(score >= DISTRESS_THRESHOLD)


def dichotomize_ghq_matrix(items: np.ndarray) -> np.ndarray:
    """Vectorized :func:`dichotomize_ghq` over an ``(n, 12)`` integer array."""
    items = np.asarray(items)
    if items.ndim != 2 or items.shape[1] != N_GHQ_ITEMS:
        raise ValidationError(f"expected an (n, {N_GHQ_ITEMS}) array, got shape {items.shape}")
    bad = (items < 0) | (items > 3)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ValidationError(f"row {row}: GHQ item {col} has value {items[row, col]}")
    return ((items >= 2).sum(axis=1) >= DISTRESS_THRESHOLD).astype(np.int8)


def derive_exposure(employment_status: str, dictionary: DataDictionary | None = None):
    """Map an employment status to 1 (exposed), 0 (control) or None (excluded)."""
    dictionary = dictionary or load_dictionary()
    if employment_status not in dictionary.employment_status:
        raise ValidationError(f"unknown employment status {employment_status!r}")
    if employment_status == dictionary.excluded_status:
        return None
    return int(employment_status == dictionary.exposed_status)


def age_band(age: float):
    """Label of the 10-year working-age band containing ``age``; None outside 16..64."""
    for lo, hi in AGE_BANDS:
        if lo <= age < hi:
            return f"[{lo},{hi})"
    return None


# ---------------------------------------------------------------------------
# Area groupings


def _rank_groups(ids, scores, n_groups, what):
    scores = np.asarray(scores, dtype=float)
    n = len(scores)
    if n < n_groups:
        raise ValidationError(f"need at least {n_groups} areas to form {what}, got {n}")
    if not np.all(np.isfinite(scores)):
        raise ValidationError(f"non-finite score while forming {what}")
    # Highest score first; equal scores keep input order.
    order = np.argsort(-scores, kind="stable")
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    groups = rank * n_groups // n + 1
    return {area: int(g) for area, g in zip(ids, groups)}


def group_deprivation(areas: Sequence[AreaAttributes]) -> dict:
    """Deciles of IMD score: 1 is the most deprived tenth, 10 the least."""
    areas = list(areas)
    return _rank_groups([a.area_id for a in areas], [a.imd_score for a in areas], 10,
                        "deprivation deciles")


def group_ethnic_mix(areas: Sequence[AreaAttributes]) -> dict:
    """Quintiles of minority share: 1 is the most ethnically mixed fifth."""
    areas = list(areas)
    return _rank_groups([a.area_id for a in areas],
                        [a.ethnic_minority_proportion for a in areas], 5,
                        "ethnic-mix quintiles")


# ---------------------------------------------------------------------------
# Survey weights


@dataclass
class WeightAdjustment:
    """Result of :func:`adjust_weights`.

    ``weights`` is aligned with the input records (NaN for excluded persons);
    ``response_probability`` is indexed by person.
    """

    weights: pd.Series
    response_probability: pd.Series
    excluded: dict = field(default_factory=dict)
    clamped: list = field(default_factory=list)


def _dummies(frame, columns, levels=None):
    blocks = [np.ones((len(frame), 1))]
    for col in columns:
        lv = list(levels[col]) if levels and col in levels else sorted(frame[col].unique(), key=str)
        values = frame[col].to_numpy()
        for level in lv[1:]:
            blocks.append((values == level).astype(float)[:, None])
    return np.hstack(blocks)


def _fit_logistic(X, r, ridge=1e-6, max_iter=100, tol=1e-10):
    """Penalized logistic MLE by Newton's method; the intercept is unpenalized."""
    beta = np.zeros(X.shape[1])
    penalty = np.full(X.shape[1], ridge)
    penalty[0] = 0.0
    for _ in range(max_iter):
        p = expit(X @ beta)
        grad = X.T @ (r - p) - penalty * beta
        H = (X * (p * (1 - p))[:, None]).T @ X + np.diag(penalty)
        step = np.linalg.solve(H + 1e-12 * np.eye(len(beta)), grad)
        beta += step
        if np.max(np.abs(step)) < tol:
            break
    return beta


def adjust_weights(
    records: pd.DataFrame,
    response_model_covariates: Sequence[str] = INDIVIDUAL_CONFOUNDERS,
    floor: float = 0.01,
    levels: Mapping[str, list] | None = None,
) -> WeightAdjustment:
    """Inflate wave-1 base weights by the inverse probability of full follow-up.

    The response indicator is "responded to every wave after the first". Its
    probability is modelled by a logistic regression on each person's wave-1
    covariates. Weights are ``base_weight / p_hat`` rescaled to mean 1 over
    the retained records. Persons absent at wave 1 are excluded; ``p_hat``
    below ``floor`` is clamped and the person is flagged.
    """
    records = records.copy()
    if "age_band" in response_model_covariates and "age_band" not in records:
        records["age_band"] = records["age"].map(age_band)
    first = records.sort_values(["person_id", "interview_year"], kind="stable")
    persons = first.groupby("person_id", sort=True).head(1).set_index("person_id")

    patterns = persons["response_pattern"].astype(str)
    present = patterns.str[0] == "1"
    excluded = {pid: "absent at wave 1" for pid in persons.index[~present]}
    for pid in excluded:
        log.info("person %s excluded from weighting: absent at wave 1", pid)
    persons = persons[present]
    patterns = patterns[present]
    if persons.empty:
        raise ValidationError("no wave-1 respondents to weight")

    complete = patterns.map(lambda s: all(ch == "1" for ch in s[1:])).to_numpy(dtype=float)
    if complete.all():
        p_hat = np.ones(len(persons))
    else:
        X = _dummies(persons, response_model_covariates, levels)
        p_hat = expit(X @ _fit_logistic(X, complete))
    low = p_hat < floor
    clamped = list(persons.index[low])
    for pid in clamped:
        log.warning("person %s: response probability below %.3g clamped", pid, floor)
    p_hat = np.maximum(p_hat, floor)

    person_weight = pd.Series(persons["base_weight"].to_numpy(float) / p_hat, index=persons.index)
    weights = records["person_id"].map(person_weight)
    mean = weights.mean()
    if not np.isfinite(mean) or mean <= 0:
        raise ValidationError("survey weights sum to zero; check base weights")
    return WeightAdjustment(
        weights=weights / mean,
        response_probability=pd.Series(p_hat, index=persons.index),
        excluded=excluded,
        clamped=clamped,
    )


# ---------------------------------------------------------------------------
# Ingestion


def _row_error(message, rows, frame):
    lines = [int(i) + 2 for i in np.flatnonzero(rows)[:10]]  # header is line 1
    return ValidationError(f"{message} at CSV line(s) {lines}")


def read_responses(path) -> pd.DataFrame:
    """Read and type-check the person-year CSV; errors name CSV line numbers."""
    try:
        frame = pd.read_csv(path, dtype={"person_id": str, "area_id": str,
                                         "response_pattern": str}, keep_default_na=True)
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: malformed CSV ({exc})") from exc
    return validate_responses(frame, source=str(path))


def validate_responses(frame: pd.DataFrame, source="responses") -> pd.DataFrame:
    missing = [c for c in RESPONSE_COLUMNS if c not in frame.columns]
    if missing:
        raise ValidationError(f"{source}: missing columns {missing}")
    frame = frame.reset_index(drop=True).copy()
    for col in ["interview_year", "age", "base_weight"] + GHQ_COLUMNS:
        numeric = pd.to_numeric(frame[col], errors="coerce")
        bad = numeric.isna() & frame[col].notna()
        if bad.any():
            raise _row_error(f"{source}: non-numeric {col}", bad.to_numpy(), frame)
        frame[col] = numeric
    if frame["interview_year"].isna().any():
        raise _row_error(f"{source}: missing interview_year", frame["interview_year"].isna(), frame)
    year = frame["interview_year"].to_numpy()
    if np.any(year != np.round(year)):
        raise _row_error(f"{source}: non-integer interview_year", year != np.round(year), frame)
    frame["interview_year"] = frame["interview_year"].astype(np.int64)
    ghq = frame[GHQ_COLUMNS].to_numpy()
    present = ~np.isnan(ghq)
    bad = present & ((ghq != np.round(ghq)) | (ghq < 0) | (ghq > 3))
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ValidationError(
            f"{source}: GHQ item {GHQ_COLUMNS[col]} has value {ghq[row, col]} at CSV line {row + 2}"
        )
    bad = frame["base_weight"].to_numpy() < 0
    if bad.any():
        raise _row_error(f"{source}: negative base_weight", bad, frame)
    pattern = frame["response_pattern"].fillna("")
    bad = ~pattern.str.fullmatch(r"[01]+")
    if bad.any():
        raise _row_error(f"{source}: response_pattern must be a string of 0/1", bad.to_numpy(), frame)
    for col in ["person_id", "area_id"]:
        if frame[col].isna().any():
            raise _row_error(f"{source}: missing {col}", frame[col].isna().to_numpy(), frame)
    return frame


def read_areas(path) -> list[AreaAttributes]:
    frame = pd.read_csv(path, dtype={"area_id": str})
    missing = [c for c in AREA_COLUMNS if c not in frame.columns]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")
    out = []
    for i, row in enumerate(frame.itertuples(index=False)):
        try:
            out.append(AreaAttributes(str(row.area_id), float(row.imd_score),
                                      float(row.ethnic_minority_proportion)))
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"{path}: CSV line {i + 2}: {exc}") from exc
    ids = [a.area_id for a in out]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate area_id")
    return out


@dataclass
class Cohort:
    """Analysis observations plus the bookkeeping of what was dropped and why."""

    observations: pd.DataFrame
    exclusions: Counter
    n_raw: int
    area_groups: pd.DataFrame
    weight_adjustment: WeightAdjustment | None = None

    def exclusion_table(self):
        return pd.DataFrame(sorted(self.exclusions.items()), columns=["reason", "rows"])


def build_cohort(
    responses: pd.DataFrame,
    areas: Iterable[AreaAttributes],
    window: StudyWindow,
    dictionary: DataDictionary | None = None,
    weight_covariates: Sequence[str] = INDIVIDUAL_CONFOUNDERS,
    weight_floor: float = 0.01,
) -> Cohort:
    """Derive analysis observations from raw person-year rows.

    Each dropped row is counted under the first exclusion reason it meets, so
    the exclusion counts always sum to ``n_raw - len(observations)``.
    """
    dictionary = dictionary or load_dictionary()
    areas = list(areas)
    frame = validate_responses(responses)
    n = len(frame)
    reason = np.full(n, None, dtype=object)

    def exclude(mask, why):
        mask = np.asarray(mask, dtype=bool) & (reason == None)  # noqa: E711
        reason[mask] = why

    status = frame["employment_status"]
    unknown = status.notna() & ~status.isin(dictionary.employment_status)
    if unknown.any():
        raise ValidationError(
            f"unknown employment status {sorted(status[unknown].unique())} "
            f"at CSV line(s) {[int(i) + 2 for i in np.flatnonzero(unknown)[:10]]}"
        )
    for col in ["education", "ethnicity", "marital_status", "sex"]:
        vals = frame[col]
        bad = vals.notna() & ~vals.isin(dictionary.levels[col])
        if bad.any():
            raise ValidationError(f"undeclared {col} level(s) {sorted(vals[bad].unique())}")

    years = frame["interview_year"].to_numpy()
    exclude((years < window.start) | (years > window.end), "outside study window")
    exclude(frame[GHQ_COLUMNS].isna().any(axis=1), "missing outcome")
    exclude(status.isna(), "missing employment status")
    exclude(status == dictionary.excluded_status, "life-time sick or disabled")
    exclude(frame["age"].isna(), "missing age")
    bands = frame["age"].map(lambda a: age_band(a) if pd.notna(a) else None)
    exclude(bands.isna(), "not working age")
    for col in ["education", "ethnicity", "marital_status", "sex"]:
        exclude(frame[col].isna(), f"missing {col}")
    known_areas = {a.area_id for a in areas}
    exclude(~frame["area_id"].isin(known_areas), "unknown area")
    exclude(frame["response_pattern"].str[0] != "1", "absent at wave 1")
    exclude(frame["base_weight"].isna() | (frame["base_weight"] <= 0), "nonpositive base weight")

    keep = reason == None  # noqa: E711
    exclusions = Counter(r for r in reason if r is not None)
    for why, count in sorted(exclusions.items()):
        log.info("excluded %d rows: %s", count, why)

    decile = group_deprivation(areas)
    quintile = group_ethnic_mix(areas)
    area_groups = pd.DataFrame({
        "area_id": [a.area_id for a in areas],
        "deprivation_decile": [decile[a.area_id] for a in areas],
        "ethnic_mix_quintile": [quintile[a.area_id] for a in areas],
    })

    kept = frame[keep].reset_index(drop=True)
    obs = pd.DataFrame({
        "person_id": kept["person_id"].astype(str),
        "area_id": kept["area_id"].astype(str),
        "interview_year": kept["interview_year"].astype(np.int64),
        "outcome": dichotomize_ghq_matrix(kept[GHQ_COLUMNS].to_numpy(np.int64)),
        "exposed": (kept["employment_status"] == dictionary.exposed_status).astype(np.int8),
        "age_band": bands[keep].to_numpy(),
        "education": kept["education"].to_numpy(),
        "ethnicity": kept["ethnicity"].to_numpy(),
        "marital_status": kept["marital_status"].to_numpy(),
        "sex": kept["sex"].to_numpy(),
        "deprivation_decile": kept["area_id"].map(decile).astype(np.int64),
        "ethnic_mix_quintile": kept["area_id"].map(quintile).astype(np.int64),
    })
    adjustment = None
    if len(obs):
        weighting_input = obs.assign(base_weight=kept["base_weight"].to_numpy(),
                                     response_pattern=kept["response_pattern"].to_numpy())
        adjustment = adjust_weights(weighting_input, weight_covariates, weight_floor,
                                    levels=dictionary.levels)
        obs["weight"] = adjustment.weights.to_numpy()
    else:
        obs["weight"] = np.zeros(0)
    return Cohort(observations=obs[OBSERVATION_COLUMNS], exclusions=exclusions, n_raw=n,
                  area_groups=area_groups, weight_adjustment=adjustment)
