"""Hierarchical interrupted-time-series logistic model.

The linear predictor for observation i in calendar year t and area l is::

    mu = b0 + b1*year + b2*intervention + b3*year_post
       + exposed * (b4 + b5*year + b6*intervention + b7*year_post)
       + confounder dummies + gamma[t] + delta[l]

with ``gamma ~ N(0, sigma_gamma^2)`` and ``delta ~ N(0, sigma_delta^2)``
independent random effects. The full parameter vector is laid out as
``[beta, gamma, delta, log_sigma_gamma, log_sigma_delta]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np
import pandas as pd
from scipy.special import expit

from .cohort import CONFOUNDERS, DataDictionary, StudyWindow, load_dictionary
from .errors import NonFiniteError, ValidationError
from .intervention import InterventionTimeline, center_times

LOG_2PI = float(np.log(2.0 * np.pi))
ITS_COLUMNS = ["intercept", "year", "intervention", "year_post"]
EXPOSURE_COLUMNS = ["exposed", "exposed:year", "exposed:intervention", "exposed:year_post"]


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def inv_logit(mu):
    return expit(mu)


def softplus(mu):
    """``log(1 + exp(mu))`` without overflow."""
    return np.logaddexp(0.0, mu)


@dataclass(frozen=True)
class PriorSpec:
    """Priors on fixed effects and random-effect standard deviations.

    ``intercept_variance=None`` gives the improper flat intercept prior. The
    standard deviations carry exponential priors with ``P(sigma > pc_u) =
    pc_alpha``.
    """

    fixed_effect_variance: float = 1000.0
    intercept_variance: float | None = None
    pc_u: float = 1.0
    pc_alpha: float = 0.1
    sum_to_zero_precision: float = 1e6

    def __post_init__(self):
        if self.fixed_effect_variance <= 0:
            raise ValidationError("fixed_effect_variance must be positive")
        if self.intercept_variance is not None and self.intercept_variance <= 0:
            raise ValidationError("intercept_variance must be positive or None")
        if self.pc_u <= 0 or not 0 < self.pc_alpha < 1:
            raise ValidationError("PC prior needs pc_u > 0 and 0 < pc_alpha < 1")

    @property
    def pc_rate(self):
        return -np.log(self.pc_alpha) / self.pc_u

    def to_dict(self):
        return asdict(self)


def pc_prior_density(sigma, priors: PriorSpec = PriorSpec()):
    """Exponential density on a random-effect standard deviation."""
    lam = priors.pc_rate
    sigma = np.asarray(sigma, dtype=float)
    return np.where(sigma >= 0, lam * np.exp(-lam * sigma), 0.0)


def pc_log_prior_log_sigma(log_sigma, priors: PriorSpec = PriorSpec()):
    """Log density of ``log(sigma)`` (exponential prior plus Jacobian)."""
    lam = priors.pc_rate
    return np.log(lam) - lam * np.exp(log_sigma) + log_sigma


# ---------------------------------------------------------------------------
# Layout and design


@dataclass
class Layout:
    """Column order and index maps; serialized as the layout manifest."""

    fixed_effects: list
    reference_levels: dict
    years: list
    areas: list
    priors: dict = field(default_factory=dict)
    window: tuple | None = None
    definition: dict | None = None

    @property
    def n_fixed(self):
        return len(self.fixed_effects)

    @property
    def n_time(self):
        return len(self.years)

    @property
    def n_area(self):
        return len(self.areas)

    @property
    def n_latent(self):
        return self.n_fixed + self.n_time + self.n_area

    @property
    def n_params(self):
        return self.n_latent + 2

    @property
    def beta_slice(self):
        return slice(0, self.n_fixed)

    @property
    def gamma_slice(self):
        return slice(self.n_fixed, self.n_fixed + self.n_time)

    @property
    def delta_slice(self):
        return slice(self.n_fixed + self.n_time, self.n_latent)

    def parameter_names(self):
        return (
            list(self.fixed_effects)
            + [f"gamma[{y}]" for y in self.years]
            + [f"delta[{a}]" for a in self.areas]
            + ["log_sigma_gamma", "log_sigma_delta"]
        )

    def to_dict(self):
        return {
            "manifest_version": 1,
            "fixed_effects": list(self.fixed_effects),
            "reference_levels": {k: _jsonable(v) for k, v in self.reference_levels.items()},
            "time_index": {str(i): int(y) for i, y in enumerate(self.years)},
            "area_index": {str(i): str(a) for i, a in enumerate(self.areas)},
            "parameter_order": ["beta", "gamma", "delta", "log_sigma_gamma", "log_sigma_delta"],
            "priors": dict(self.priors),
            "fixed_effect_prior_scale": "variance",
            "window": list(self.window) if self.window else None,
            "definition": self.definition,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw):
        n_t, n_l = len(raw["time_index"]), len(raw["area_index"])
        return cls(
            fixed_effects=list(raw["fixed_effects"]),
            reference_levels=dict(raw["reference_levels"]),
            years=[int(raw["time_index"][str(i)]) for i in range(n_t)],
            areas=[str(raw["area_index"][str(i)]) for i in range(n_l)],
            priors=dict(raw.get("priors", {})),
            window=tuple(raw["window"]) if raw.get("window") else None,
            definition=raw.get("definition"),
        )


def _jsonable(v):
    return v.item() if isinstance(v, np.generic) else v


@dataclass(frozen=True)
class DesignRow:
    its_block: np.ndarray
    exposure_block: np.ndarray
    confounder_block: np.ndarray
    time_index: int
    area_index: int

    @property
    def fixed(self):
        return np.concatenate([self.its_block, self.exposure_block, self.confounder_block])


@dataclass
class Design:
    """Fixed-effect matrix plus random-effect indices for a set of observations.

    ``frame`` is the observation table augmented with the centered time
    columns (``year``, ``intervention``, ``year_post``) and the integer
    indices ``t`` and ``l``.
    """

    X: np.ndarray
    t_index: np.ndarray
    l_index: np.ndarray
    layout: Layout
    frame: pd.DataFrame

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def outcomes(self):
        return self.frame["outcome"].to_numpy(dtype=float)

    @property
    def weights(self):
        return self.frame["weight"].to_numpy(dtype=float)

    @cached_property
    def Z(self):
        """Dense ``[X | time one-hot | area one-hot]``."""
        n, lay = self.n, self.layout
        Z = np.zeros((n, lay.n_latent))
        Z[:, : lay.n_fixed] = self.X
        rows = np.arange(n)
        Z[rows, lay.n_fixed + self.t_index] = 1.0
        Z[rows, lay.n_fixed + lay.n_time + self.l_index] = 1.0
        return Z

    def row(self, i) -> DesignRow:
        x = self.X[i]
        return DesignRow(x[:4].copy(), x[4:8].copy(), x[8:].copy(),
                         int(self.t_index[i]), int(self.l_index[i]))

    def subset(self, mask) -> "Design":
        mask = np.asarray(mask)
        return Design(self.X[mask], self.t_index[mask], self.l_index[mask], self.layout,
                      self.frame[mask].reset_index(drop=True))


def _awareness_year(value):
    if isinstance(value, InterventionTimeline):
        return value.awareness_year
    return value


def build_design(
    observations: pd.DataFrame,
    timelines: Mapping,
    window: StudyWindow,
    dictionary: DataDictionary | None = None,
    priors: PriorSpec | None = None,
    definition: dict | None = None,
) -> Design:
    """Assemble the design for ``observations`` under the given timelines.

    ``timelines`` maps area_id to an :class:`InterventionTimeline` or directly
    to an awareness year (None for never-aware areas). Every categorical is
    dummy coded against its first declared level.
    """
    dictionary = dictionary or load_dictionary()
    priors = priors or PriorSpec()
    obs = observations.reset_index(drop=True)
    if obs.empty:
        raise ValidationError("no observations to build a design from")

    areas_in_obs = sorted(obs["area_id"].astype(str).unique())
    missing = [a for a in areas_in_obs if a not in timelines]
    if missing:
        raise ValidationError(f"areas without intervention timelines: {missing}")
    problems = []
    for col in CONFOUNDERS:
        declared = list(dictionary.levels[col])
        bad = sorted({v for v in obs[col].unique() if v not in declared}, key=str)
        if bad:
            problems.append(f"{col}: {bad}")
    if problems:
        raise ValidationError("undeclared levels: " + "; ".join(problems))

    aware = obs["area_id"].astype(str).map(lambda a: _awareness_year(timelines[a]))
    year, intervention, year_post = center_times(obs["interview_year"], aware, window)
    exposed = obs["exposed"].to_numpy(dtype=float)

    its = np.column_stack([np.ones(len(obs)), year, intervention, year_post]).astype(float)
    blocks = [its, exposed[:, None] * its]
    names = ITS_COLUMNS + EXPOSURE_COLUMNS
    references = {}
    for col in CONFOUNDERS:
        levels = list(dictionary.levels[col])
        references[col] = levels[0]
        values = obs[col].to_numpy()
        for level in levels[1:]:
            blocks.append((values == level).astype(float)[:, None])
            names.append(f"{col}[{level}]")
    X = np.hstack(blocks)

    years = sorted(int(y) for y in obs["interview_year"].unique())
    t_index = obs["interview_year"].map({y: i for i, y in enumerate(years)}).to_numpy(np.int64)
    l_index = obs["area_id"].astype(str).map({a: i for i, a in enumerate(areas_in_obs)}).to_numpy(np.int64)

    layout = Layout(
        fixed_effects=names,
        reference_levels=references,
        years=years,
        areas=areas_in_obs,
        priors=priors.to_dict(),
        window=(window.start, window.end),
        definition=definition,
    )
    frame = obs.assign(year=year, intervention=intervention, year_post=year_post,
                       t=t_index, l=l_index,
                       awareness_year=aware.to_numpy(dtype=object))
    return Design(X=X, t_index=t_index, l_index=l_index, layout=layout, frame=frame)


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class ParameterVector:
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    log_sigma_gamma: float
    log_sigma_delta: float

    @property
    def sigma_gamma(self):
        return float(np.exp(self.log_sigma_gamma))

    @property
    def sigma_delta(self):
        return float(np.exp(self.log_sigma_delta))

    def to_array(self):
        return np.concatenate([self.beta, self.gamma, self.delta,
                               [self.log_sigma_gamma, self.log_sigma_delta]]).astype(float)

    @classmethod
    def from_array(cls, theta, layout: Layout):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (layout.n_params,):
            raise ValidationError(f"parameter vector has shape {theta.shape}, "
                                  f"layout expects ({layout.n_params},)")
        return cls(theta[layout.beta_slice].copy(), theta[layout.gamma_slice].copy(),
                   theta[layout.delta_slice].copy(), float(theta[-2]), float(theta[-1]))

    @classmethod
    def zeros(cls, layout: Layout, log_sigma_gamma=0.0, log_sigma_delta=0.0):
        return cls(np.zeros(layout.n_fixed), np.zeros(layout.n_time), np.zeros(layout.n_area),
                   log_sigma_gamma, log_sigma_delta)


def _as_theta(params, layout):
    if isinstance(params, ParameterVector):
        theta = params.to_array()
    else:
        theta = np.asarray(params, dtype=float)
    if theta.shape != (layout.n_params,):
        raise ValidationError(f"parameter vector has shape {theta.shape}, "
                              f"expected ({layout.n_params},)")
    return theta


def linear_predictor(params, target):
    """``mu`` for a :class:`DesignRow` (scalar) or a whole :class:`Design` (vector)."""
    if isinstance(target, DesignRow):
        if not isinstance(params, ParameterVector):
            raise ValidationError("evaluate a single DesignRow with a ParameterVector")
        if len(params.beta) != len(target.fixed):
            raise ValidationError("row width does not match parameter vector")
        return float(target.fixed @ params.beta + params.gamma[target.time_index]
                     + params.delta[target.area_index])
    theta = _as_theta(params, target.layout)
    return target.Z @ theta[: target.layout.n_latent]


# ---------------------------------------------------------------------------
# Log-posterior


class LogPosterior:
    """Survey-weighted log-posterior over ``[beta, gamma, delta, log sigmas]``.

    The random effects carry a soft sum-to-zero penalty
    ``-kappa/2 * (sum gamma)^2`` (likewise for delta). Because that penalty
    pins one direction, the Gaussian normalizing constant uses rank
    ``T - 1`` (``L - 1``), which is the density of the constrained field.
    """

    def __init__(self, design: Design, outcomes=None, weights=None,
                 priors: PriorSpec = PriorSpec()):
        self.design = design
        self.layout = design.layout
        self.y = design.outcomes if outcomes is None else np.asarray(outcomes, dtype=float)
        self.w = design.weights if weights is None else np.asarray(weights, dtype=float)
        if self.y.shape != (design.n,) or self.w.shape != (design.n,):
            raise ValidationError("outcomes and weights must match the design rows")
        if np.any(self.w < 0) or not np.all(np.isfinite(self.w)):
            raise ValidationError("survey weights must be nonnegative and finite")
        self.priors = priors
        lay = self.layout
        prec = np.full(lay.n_fixed, 1.0 / priors.fixed_effect_variance)
        prec[0] = 0.0 if priors.intercept_variance is None else 1.0 / priors.intercept_variance
        self._beta_prec = prec
        self._beta_logc = np.where(prec > 0, -0.5 * (LOG_2PI - np.log(np.where(prec > 0, prec, 1.0))), 0.0)

    # -- pieces ------------------------------------------------------------
    def _split(self, theta):
        lay = self.layout
        return (theta[lay.beta_slice], theta[lay.gamma_slice], theta[lay.delta_slice],
                theta[-2], theta[-1])

    def _re_terms(self, u, log_sigma):
        k = len(u)
        rank = max(k - 1, 0)
        ss = float(u @ u)
        total = float(u.sum())
        return (-0.5 * ss * np.exp(-2.0 * log_sigma) - rank * log_sigma - 0.5 * rank * LOG_2PI,
                -0.5 * self.priors.sum_to_zero_precision * total * total)

    def terms(self, theta):
        """Named log-posterior components, each checked for finiteness."""
        theta = _as_theta(theta, self.layout)
        beta, gamma, delta, sg, sd = self._split(theta)
        mu = self.design.Z @ theta[: self.layout.n_latent]
        out = {"loglik": float(self.w @ (self.y * mu - softplus(mu)))}
        out["prior_beta"] = float(np.sum(-0.5 * self._beta_prec * beta * beta + self._beta_logc))
        out["prior_gamma"], out["sum_to_zero_gamma"] = self._re_terms(gamma, sg)
        out["prior_delta"], out["sum_to_zero_delta"] = self._re_terms(delta, sd)
        out["prior_sigma_gamma"] = float(pc_log_prior_log_sigma(sg, self.priors))
        out["prior_sigma_delta"] = float(pc_log_prior_log_sigma(sd, self.priors))
        for name, value in out.items():
            if not np.isfinite(value):
                raise NonFiniteError(name, value)
        return out

    def value(self, theta):
        return float(sum(self.terms(theta).values()))

    def gradient(self, theta):
        theta = _as_theta(theta, self.layout)
        lay = self.layout
        beta, gamma, delta, sg, sd = self._split(theta)
        mu = self.design.Z @ theta[: lay.n_latent]
        resid = self.w * (self.y - expit(mu))
        g = np.empty(lay.n_params)
        g[: lay.n_latent] = self.design.Z.T @ resid
        g[lay.beta_slice] -= self._beta_prec * beta
        kappa = self.priors.sum_to_zero_precision
        lam = self.priors.pc_rate
        for sl, u, s, idx in ((lay.gamma_slice, gamma, sg, -2), (lay.delta_slice, delta, sd, -1)):
            inv_var = np.exp(-2.0 * s)
            g[sl] -= u * inv_var + kappa * u.sum()
            g[idx] = float(u @ u) * inv_var - max(len(u) - 1, 0) - lam * np.exp(s) + 1.0
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("gradient", g[~np.isfinite(g)][0])
        return g

    def hessian(self, theta):
        theta = _as_theta(theta, self.layout)
        lay = self.layout
        beta, gamma, delta, sg, sd = self._split(theta)
        H = np.zeros((lay.n_params, lay.n_params))
        H[: lay.n_latent, : lay.n_latent] = -self.latent_information(theta[: lay.n_latent], sg, sd)
        lam = self.priors.pc_rate
        for sl, u, s, idx in ((lay.gamma_slice, gamma, sg, -2), (lay.delta_slice, delta, sd, -1)):
            inv_var = np.exp(-2.0 * s)
            H[sl, idx] = H[idx, sl] = 2.0 * u * inv_var
            H[idx, idx] = -2.0 * float(u @ u) * inv_var - lam * np.exp(s)
        return H

    # -- latent block at fixed hyperparameters ------------------------------
    def prior_precision(self, log_sigma_gamma, log_sigma_delta):
        """Prior precision matrix of the latent field (including the penalty)."""
        lay = self.layout
        Q = np.diag(np.concatenate([
            self._beta_prec,
            np.full(lay.n_time, np.exp(-2.0 * log_sigma_gamma)),
            np.full(lay.n_area, np.exp(-2.0 * log_sigma_delta)),
        ]))
        kappa = self.priors.sum_to_zero_precision
        Q[lay.gamma_slice, lay.gamma_slice] += kappa
        Q[lay.delta_slice, lay.delta_slice] += kappa
        return Q

    def latent_information(self, x, log_sigma_gamma, log_sigma_delta):
        """Negative Hessian of the log-posterior in the latent field."""
        Z = self.design.Z
        p = expit(Z @ x)
        c = self.w * p * (1.0 - p)
        A = (Z * c[:, None]).T @ Z
        # BLAS need not return a bit-symmetric product
        A = 0.5 * (A + A.T)
        return A + self.prior_precision(log_sigma_gamma, log_sigma_delta)

    def latent_value_grad(self, x, log_sigma_gamma, log_sigma_delta):
        theta = np.concatenate([x, [log_sigma_gamma, log_sigma_delta]])
        g = self.gradient(theta)
        return self.value(theta), g[: self.layout.n_latent]


def log_posterior(params, design: Design, outcomes=None, weights=None,
                  priors: PriorSpec = PriorSpec()):
    return LogPosterior(design, outcomes, weights, priors).value(params)


def gradient(params, design: Design, outcomes=None, weights=None,
             priors: PriorSpec = PriorSpec()):
    return LogPosterior(design, outcomes, weights, priors).gradient(params)


def hessian(params, design: Design, outcomes=None, weights=None,
            priors: PriorSpec = PriorSpec()):
    return LogPosterior(design, outcomes, weights, priors).hessian(params)
