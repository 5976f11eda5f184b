"""Posterior summaries: marginal prevalences, exposed/control ratios and rho.

Draws of the linear predictor are averaged over a stratum of observations
(survey weighted, on the logit scale by default), mapped to prevalences and
combined into the standardised change

    rho = (p_EA - p~_EB) / p~_EB,    p~_EB = expit(mu_EB * mu_CA / mu_CB),

where E/C are the exposed and control groups and B/A the years before and
after each area's intervention year.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ValidationError
from .model import inv_logit, logit

EMPTY = "EMPTY"
PERCENTILE_METHOD = "linear"  # type 7
LEVEL = 0.95
STRATA = ("EA", "EB", "CA", "CB")


# ---------------------------------------------------------------------------
# Queries


@dataclass(frozen=True)
class ProfileQuery:
    """Selector for a set of observations.

    ``years`` is an inclusive range of centered years, ``levels`` maps a
    column (confounder or ``area_id``) to the allowed values, ``period`` is
    ``"before"``, ``"after"`` or None and ``exposed`` is 0, 1 or None.
    """

    years: tuple | None = None
    areas: tuple | None = None
    exposed: int | None = None
    levels: tuple = ()
    period: str | None = None

    def __post_init__(self):
        if self.period not in (None, "before", "after"):
            raise ValidationError(f"period must be 'before', 'after' or None, got {self.period!r}")
        if self.exposed not in (None, 0, 1):
            raise ValidationError(f"exposed must be 0, 1 or None, got {self.exposed!r}")
        if isinstance(self.levels, Mapping):
            object.__setattr__(self, "levels", tuple(
                (k, tuple(v) if isinstance(v, (list, tuple)) else (v,))
                for k, v in sorted(self.levels.items())))
        if self.areas is not None:
            object.__setattr__(self, "areas", tuple(str(a) for a in self.areas))
        if self.years is not None:
            lo, hi = self.years
            object.__setattr__(self, "years", (int(lo), int(hi)))

    def where(self, **changes) -> "ProfileQuery":
        return replace(self, **changes)

    def constrain(self, column, *values) -> "ProfileQuery":
        return replace(self, levels=dict(self.levels) | {column: tuple(values)})

    def mask(self, frame: pd.DataFrame) -> np.ndarray:
        m = np.ones(len(frame), dtype=bool)
        if self.years is not None:
            y = frame["year"].to_numpy()
            m &= (y >= self.years[0]) & (y <= self.years[1])
        if self.areas is not None:
            m &= frame["area_id"].astype(str).isin(self.areas).to_numpy()
        if self.exposed is not None:
            m &= frame["exposed"].to_numpy() == self.exposed
        if self.period is not None:
            post = frame["intervention"].to_numpy() == 1
            m &= post if self.period == "after" else ~post
        for col, allowed in self.levels:
            if col not in frame.columns:
                raise ValidationError(f"unknown profile dimension {col!r}")
            m &= _isin(frame[col], allowed)
        return m

    def describe(self) -> str:
        parts = []
        if self.years is not None:
            lo, hi = self.years
            parts.append(f"year={lo}" if lo == hi else f"year in [{lo}, {hi}]")
        if self.areas is not None:
            parts.append(f"area in {list(self.areas)}")
        if self.exposed is not None:
            parts.append("exposed" if self.exposed else "control")
        if self.period is not None:
            parts.append(f"{self.period} intervention")
        parts += [f"{c}={v[0]}" if len(v) == 1 else f"{c} in {list(v)}" for c, v in self.levels]
        return ", ".join(parts) or "all observations"


def _isin(series, allowed):
    # Compare as strings so integer levels read back from CSV still match.
    return series.astype(str).isin([str(a) for a in allowed]).to_numpy()


# ---------------------------------------------------------------------------
# Linear predictor draws


class LinearPredictor:
    """Per-draw linear predictor over the observations of ``frame``.

    Either ``latent`` draws (N x d) with the matching design matrix ``Z``
    (n x d), or an explicit matrix ``mu`` (N x n).
    """

    def __init__(self, frame: pd.DataFrame, latent=None, Z=None, mu=None):
        if (mu is None) == (latent is None):
            raise ValidationError("give either latent draws with Z, or mu")
        self.frame = frame.reset_index(drop=True)
        self.weights = self.frame["weight"].to_numpy(dtype=float)
        if mu is not None:
            self.mu = np.atleast_2d(np.asarray(mu, dtype=float))
            if self.mu.shape[1] != len(frame):
                raise ValidationError("mu must have one column per observation")
            self.latent = self.Z = None
        else:
            self.latent = np.atleast_2d(np.asarray(latent, dtype=float))
            self.Z = np.asarray(Z, dtype=float)
            if self.Z.shape != (len(frame), self.latent.shape[1]):
                raise ValidationError("Z must be n_observations x n_latent")
            self.mu = None

    @classmethod
    def from_fitted(cls, fitted, design):
        lay = fitted.layout
        return cls(design.frame, latent=fitted.draws[:, : lay.n_latent], Z=design.Z)

    @property
    def n_draws(self):
        return (self.mu if self.mu is not None else self.latent).shape[0]

    def mu_columns(self, mask):
        """Per-draw mu of the selected observations, shape (N, n_selected)."""
        if self.mu is not None:
            return self.mu[:, mask]
        return self.latent @ self.Z[mask].T

    def weighted_mu(self, mask):
        w = self.weights[mask]
        if self.mu is not None:
            return self.mu[:, mask] @ w / w.sum()
        # mu is linear in the latent field, so average the design rows first.
        return self.latent @ (w @ self.Z[mask] / w.sum())

    def weighted_probability(self, mask):
        w = self.weights[mask]
        return inv_logit(self.mu_columns(mask)) @ w / w.sum()


@dataclass
class Stratum:
    """Per-draw marginal linear predictor of one stratum, or EMPTY."""

    query: ProfileQuery
    n_observations: int
    values: np.ndarray | None = None
    reason: str | None = None

    @property
    def empty(self):
        return self.values is None


def marginal_mu(predictor: LinearPredictor, query: ProfileQuery,
                aggregation: str = "linear") -> Stratum:
    """Survey-weighted mean of mu over the stratum, per draw.

    With ``aggregation="probability"`` the probabilities are averaged
    instead and mapped back to the logit scale.
    """
    mask = query.mask(predictor.frame)
    n = int(mask.sum())
    if n == 0:
        return Stratum(query, 0, None, f"no observations with {query.describe()}")
    if aggregation == "linear":
        values = predictor.weighted_mu(mask)
    elif aggregation == "probability":
        values = logit(predictor.weighted_probability(mask))
    else:
        raise ValidationError(f"unknown aggregation {aggregation!r}")
    return Stratum(query, n, values)


# ---------------------------------------------------------------------------
# Summaries


@dataclass(frozen=True)
class Summary:
    lower: float
    median: float
    upper: float

    def as_dict(self, prefix=""):
        return {f"{prefix}lower": self.lower, f"{prefix}median": self.median,
                f"{prefix}upper": self.upper}


EMPTY_SUMMARY = Summary(float("nan"), float("nan"), float("nan"))


def summarize(draws, level: float = LEVEL) -> Summary:
    """Median and equal-tailed interval using type-7 percentiles."""
    draws = np.asarray(draws, dtype=float).ravel()
    if draws.size == 0:
        return EMPTY_SUMMARY
    tail = 50.0 * (1.0 - level)
    lo, med, hi = np.percentile(draws, [tail, 50.0, 100.0 - tail], method=PERCENTILE_METHOD)
    return Summary(float(lo), float(med), float(hi))


def prevalence(mu_bar) -> Summary:
    """Posterior summary of ``expit(mu_bar)``."""
    return summarize(inv_logit(np.asarray(mu_bar, dtype=float)))


def exposed_control_ratio(prev_exposed, prev_control) -> Summary:
    """Summary of the per-draw ratio of exposed to control prevalence."""
    pe, pc = np.asarray(prev_exposed, float), np.asarray(prev_control, float)
    if pe.shape != pc.shape:
        raise ValidationError("exposed and control draws differ in shape")
    return summarize(pe / pc)


@dataclass
class RhoDraws:
    rho: np.ndarray
    p_exposed_after: np.ndarray
    p_tilde_exposed_before: np.ndarray
    excluded: int

    def summary(self) -> Summary:
        return summarize(self.rho)


def rho_draws(mu_ea, mu_eb, mu_ca, mu_cb, adjustment: str = "multiplicative") -> RhoDraws:
    """Per-draw standardised change.

    ``multiplicative`` uses ``mu_EB * mu_CA / mu_CB``; draws with
    ``mu_CB == 0`` are excluded and counted. ``additive`` uses
    ``mu_EB + mu_CA - mu_CB`` on the logit scale.
    """
    mu_ea, mu_eb, mu_ca, mu_cb = (np.asarray(a, dtype=float).ravel()
                                  for a in (mu_ea, mu_eb, mu_ca, mu_cb))
    if adjustment == "multiplicative":
        keep = mu_cb != 0
        adjusted = mu_eb[keep] * mu_ca[keep] / mu_cb[keep]
    elif adjustment == "additive":
        keep = np.ones(mu_eb.shape, dtype=bool)
        adjusted = mu_eb + mu_ca - mu_cb
    else:
        raise ValidationError(f"unknown adjustment {adjustment!r}")
    p_ea = inv_logit(mu_ea[keep])
    p_eb = inv_logit(adjusted)
    return RhoDraws((p_ea - p_eb) / p_eb, p_ea, p_eb, int((~keep).sum()))


@dataclass
class EffectSummary:
    label: str
    query: ProfileQuery
    n: dict
    status: str = "ok"
    reason: str | None = None
    rho: Summary = EMPTY_SUMMARY
    p_exposed_after: Summary = EMPTY_SUMMARY
    p_tilde_exposed_before: Summary = EMPTY_SUMMARY
    prevalence_exposed: Summary = EMPTY_SUMMARY
    prevalence_control: Summary = EMPTY_SUMMARY
    ratio: Summary = EMPTY_SUMMARY
    excluded_draws: int = 0
    draws: RhoDraws | None = field(default=None, repr=False)

    @property
    def empty(self):
        return self.status == EMPTY

    def row(self) -> dict:
        out = {"label": self.label, "status": self.status, "reason": self.reason}
        out |= self.rho.as_dict("rho_")
        out |= self.p_exposed_after.as_dict("p_exposed_after_")
        out |= self.p_tilde_exposed_before.as_dict("p_tilde_exposed_before_")
        out |= self.prevalence_exposed.as_dict("prevalence_exposed_")
        out |= self.prevalence_control.as_dict("prevalence_control_")
        out |= self.ratio.as_dict("ratio_")
        out |= {f"n_{k}": v for k, v in self.n.items()}
        out["excluded_draws"] = self.excluded_draws
        return out


def standardised_change(predictor: LinearPredictor, query: ProfileQuery = ProfileQuery(),
                        label: str | None = None, adjustment: str = "multiplicative",
                        aggregation: str = "linear") -> EffectSummary:
    """Rho and prevalences for the cell selected by ``query``.

    The four strata split the cell by exposure and by period (all years
    before or after each area's own intervention year). Any empty stratum
    makes the cell EMPTY.
    """
    strata = {
        "EA": query.where(exposed=1, period="after"),
        "EB": query.where(exposed=1, period="before"),
        "CA": query.where(exposed=0, period="after"),
        "CB": query.where(exposed=0, period="before"),
    }
    mus = {k: marginal_mu(predictor, q, aggregation) for k, q in strata.items()}
    n = {k: s.n_observations for k, s in mus.items()}
    label = label or query.describe()
    empty = [k for k in STRATA if mus[k].empty]
    if empty:
        reason = "; ".join(mus[k].reason for k in empty)
        return EffectSummary(label, query, n, EMPTY, reason)
    rd = rho_draws(mus["EA"].values, mus["EB"].values, mus["CA"].values, mus["CB"].values,
                   adjustment)
    if rd.rho.size == 0:
        return EffectSummary(label, query, n, EMPTY, "every draw has a zero control-before mean",
                             excluded_draws=rd.excluded)
    whole_e = marginal_mu(predictor, query.where(exposed=1), aggregation).values
    whole_c = marginal_mu(predictor, query.where(exposed=0), aggregation).values
    pe, pc = inv_logit(whole_e), inv_logit(whole_c)
    return EffectSummary(
        label, query, n,
        rho=rd.summary(),
        p_exposed_after=summarize(rd.p_exposed_after),
        p_tilde_exposed_before=summarize(rd.p_tilde_exposed_before),
        prevalence_exposed=summarize(pe),
        prevalence_control=summarize(pc),
        ratio=exposed_control_ratio(pe, pc),
        excluded_draws=rd.excluded,
        draws=rd,
    )


# ---------------------------------------------------------------------------
# Sweeps and tables


def _levels(frame, column, levels=None):
    if levels is not None:
        return list(levels)
    if column not in frame.columns:
        raise ValidationError(f"unknown profile dimension {column!r}")
    return sorted(frame[column].dropna().unique().tolist(), key=_sort_key)


def _sort_key(v):
    try:
        return (0, float(v), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(v))


def sort_cells(cells: Sequence[EffectSummary]) -> list:
    """Populated cells by descending median rho, then EMPTY cells in input order."""
    full = [c for c in cells if not c.empty]
    full.sort(key=lambda c: -c.rho.median)
    return full + [c for c in cells if c.empty]


def profile_sweep(predictor: LinearPredictor, dimensions: Sequence[str],
                  levels: Mapping[str, Sequence] | None = None, joint: bool = False,
                  base: ProfileQuery = ProfileQuery(), **kwargs) -> pd.DataFrame:
    """Rho per level of each dimension (or per level combination if ``joint``).

    ``dimensions`` may include ``"area_id"`` for a per-area sweep. Levels
    default to those present in the data; pass ``levels`` to enumerate
    unpopulated levels too. Rows are sorted by descending median rho.
    """
    levels = levels or {}
    frame = predictor.frame
    cells = []
    if joint:
        grids = [_levels(frame, d, levels.get(d)) for d in dimensions]
        for combo in itertools.product(*grids):
            q = base
            for d, v in zip(dimensions, combo):
                q = q.constrain(d, v)
            cell = standardised_change(predictor, q, **kwargs)
            cell.selectors = dict(zip(dimensions, combo))
            cells.append(cell)
    else:
        for d in dimensions:
            for v in _levels(frame, d, levels.get(d)):
                cell = standardised_change(predictor, base.constrain(d, v), **kwargs)
                cell.selectors = {"dimension": d, "level": v}
                cells.append(cell)
    rows = [c.selectors | c.row() for c in sort_cells(cells)]
    return pd.DataFrame(rows)


def area_sweep(predictor: LinearPredictor, areas: Sequence[str] | None = None, **kwargs):
    """Per-area rho; areas without data in some stratum are EMPTY."""
    levels = {"area_id": list(areas)} if areas is not None else None
    table = profile_sweep(predictor, ["area_id"], levels=levels, **kwargs)
    return table.drop(columns="dimension").rename(columns={"level": "area_id"})


def trend_table(predictor: LinearPredictor, years: Sequence[int] | None = None,
                aggregation: str = "linear", return_draws: bool = False):
    """Prevalence by centered year plus before, after and all-years rows.

    Columns: period, year, prevalence (lower/median/upper) for exposed and
    control, the per-draw exposed/control ratio summary and row counts.
    """
    frame = predictor.frame
    if years is None:
        years = sorted(int(y) for y in frame["year"].unique())
    specs = [(f"year={y}", y, ProfileQuery(years=(y, y))) for y in years]
    specs += [("before", None, ProfileQuery(period="before")),
              ("after", None, ProfileQuery(period="after")),
              ("all", None, ProfileQuery())]
    rows, draws = [], []
    for label, year, q in specs:
        e = marginal_mu(predictor, q.where(exposed=1), aggregation)
        c = marginal_mu(predictor, q.where(exposed=0), aggregation)
        row = {"period": label, "year": year, "n_exposed": e.n_observations,
               "n_control": c.n_observations}
        if e.empty or c.empty:
            row |= {"status": EMPTY, "reason": e.reason if e.empty else c.reason}
            row |= EMPTY_SUMMARY.as_dict("exposed_") | EMPTY_SUMMARY.as_dict("control_")
            row |= EMPTY_SUMMARY.as_dict("ratio_")
        else:
            pe, pc = inv_logit(e.values), inv_logit(c.values)
            row |= {"status": "ok", "reason": None}
            row |= summarize(pe).as_dict("exposed_") | summarize(pc).as_dict("control_")
            row |= exposed_control_ratio(pe, pc).as_dict("ratio_")
            draws.append(pd.DataFrame({"period": label, "draw": np.arange(len(pe)),
                                       "prevalence_exposed": pe, "prevalence_control": pc}))
        rows.append(row)
    table = pd.DataFrame(rows)
    if return_draws:
        long = pd.concat(draws, ignore_index=True) if draws else pd.DataFrame(
            columns=["period", "draw", "prevalence_exposed", "prevalence_control"])
        return table, long
    return table
