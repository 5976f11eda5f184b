"""Random-walk Metropolis-within-Gibbs sampler used as a reference for the Laplace fit.

The log density is evaluated here from scratch, vectorized across chains,
so the sampler shares no numerical code with the optimizer. Each sweep
updates the latent field given the log sigmas with a preconditioned random
walk, then each log sigma given the latent field with a scalar random walk.
The preconditioner depends on the current sigmas only, so the latent
proposal is symmetric within its Gibbs block; this keeps the stiff
sum-to-zero direction and the funnel between a random effect and its
standard deviation from stalling the chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg

from .errors import OracleDisagreement, ValidationError
from .model import Design, PriorSpec

RHAT_LIMIT = 1.05


class _Target:
    """Log posterior pieces for a stack of chains (rows of ``theta``)."""

    def __init__(self, design: Design, outcomes, weights, priors: PriorSpec):
        lay = design.layout
        self.layout = lay
        self.Z = design.Z
        self.y = np.asarray(design.outcomes if outcomes is None else outcomes, float)
        self.w = np.asarray(design.weights if weights is None else weights, float)
        if np.any(self.w < 0):
            raise ValidationError("survey weights must be nonnegative")
        self.priors = priors
        prec = np.full(lay.n_fixed, 1.0 / priors.fixed_effect_variance)
        prec[0] = 0.0 if priors.intercept_variance is None else 1.0 / priors.intercept_variance
        self.beta_prec = prec
        self.kappa = priors.sum_to_zero_precision
        self.lam = priors.pc_rate

    def latent(self, x, s):
        """Log density of the latent field (chains x n_latent) given log sigmas (chains x 2)."""
        lay = self.layout
        mu = x @ self.Z.T
        lp = (self.w * (self.y * mu - np.logaddexp(0.0, mu))).sum(axis=1)
        beta = x[:, lay.beta_slice]
        lp -= 0.5 * (beta * beta) @ self.beta_prec
        for sl, col in ((lay.gamma_slice, 0), (lay.delta_slice, 1)):
            lp += self.random_effect(x[:, sl], s[:, col])
        return lp

    def random_effect(self, u, s):
        """Prior of one random-effect block plus the PC prior of its log sigma."""
        lp = self.sigma_terms((u * u).sum(axis=1), u.shape[1], s)
        return lp - 0.5 * self.kappa * u.sum(axis=1) ** 2

    def sigma_terms(self, ss, k, s):
        """Terms of :meth:`random_effect` that depend on the log sigma ``s``."""
        rank = max(k - 1, 0)
        return -0.5 * ss * np.exp(-2.0 * s) - rank * s + np.log(self.lam) - self.lam * np.exp(s) + s

    def __call__(self, theta):
        theta = np.atleast_2d(theta)
        n = self.layout.n_latent
        lp = self.latent(theta[:, :n], theta[:, n:])
        return np.where(np.isfinite(lp), lp, -np.inf)

    def data_precision(self, x_ref):
        """Fixed part of the latent curvature at ``x_ref`` (everything but the sigmas)."""
        lay = self.layout
        p = 1.0 / (1.0 + np.exp(-(self.Z @ x_ref)))
        A = (self.Z * (self.w * p * (1 - p))[:, None]).T @ self.Z
        A[lay.beta_slice, lay.beta_slice] += np.diag(self.beta_prec)
        A[lay.gamma_slice, lay.gamma_slice] += self.kappa
        A[lay.delta_slice, lay.delta_slice] += self.kappa
        return A

    def precision(self, A0, s):
        lay = self.layout
        A = A0.copy()
        idx = np.arange(lay.n_latent)
        A[idx[lay.gamma_slice], idx[lay.gamma_slice]] += np.exp(-2 * s[0])
        A[idx[lay.delta_slice], idx[lay.delta_slice]] += np.exp(-2 * s[1])
        return A


@dataclass
class OracleResult:
    draws: np.ndarray               # (chains, kept iterations, n_params)
    names: list
    rhat: np.ndarray
    ess: np.ndarray
    acceptance: dict
    seed: int
    settings: dict = field(default_factory=dict)

    @property
    def flat(self):
        return self.draws.reshape(-1, self.draws.shape[-1])

    def mean(self):
        return self.flat.mean(axis=0)

    def sd(self):
        return self.flat.std(axis=0, ddof=1)

    @property
    def max_rhat(self):
        return float(np.nanmax(self.rhat))

    @property
    def converged(self):
        return self.max_rhat <= RHAT_LIMIT

    def flagged(self):
        return [n for n, r in zip(self.names, self.rhat) if not r <= RHAT_LIMIT]

    def summary(self):
        return pd.DataFrame({"name": self.names, "mean": self.mean(), "sd": self.sd(),
                             "rhat": self.rhat, "ess": self.ess})


def mcmc_oracle(
    design: Design,
    outcomes=None,
    weights=None,
    priors: PriorSpec = PriorSpec(),
    chains: int = 4,
    iterations: int = 20000,
    seed: int = 0,
    warmup: int = 4000,
    thin: int = 5,
    hyper_steps: int = 5,
) -> OracleResult:
    """Sample the posterior over ``[beta, gamma, delta, log sigmas]``.

    Warmup adapts the latent step size (target acceptance 0.234) and the
    log-sigma step sizes (target 0.44) and re-centers the preconditioner at
    the pooled chain mean halfway through. Sampling then runs with frozen
    proposals. Chains start from dispersed points.
    """
    if chains < 2:
        raise ValidationError("at least two chains are needed for split R-hat")
    target = _Target(design, outcomes, weights, priors)
    lay = target.layout
    n_lat = lay.n_latent
    rng = np.random.default_rng(seed)

    x = 0.1 * rng.standard_normal((chains, n_lat))
    ybar = np.average(target.y, weights=target.w) if target.w.sum() > 0 else 0.5
    x[:, 0] += np.log(np.clip(ybar, 0.01, 0.99) / (1 - np.clip(ybar, 0.01, 0.99)))
    s = np.log(0.3) + 0.5 * rng.standard_normal((chains, 2))
    lp = target.latent(x, s)
    A0 = target.data_precision(x.mean(axis=0))

    log_step = np.log(2.38 / np.sqrt(n_lat))
    log_hstep = np.full(2, np.log(0.5))
    acc_lat, acc_hyp = [], []
    keep = iterations // thin
    out = np.empty((chains, keep, lay.n_params))
    for it in range(warmup + iterations):
        adapting = it < warmup
        if it == warmup // 2:
            A0 = target.data_precision(x.mean(axis=0))
        # latents | sigmas
        z = rng.standard_normal((chains, n_lat))
        prop = np.empty_like(x)
        for c in range(chains):
            L = linalg.cholesky(target.precision(A0, s[c]), lower=True, check_finite=False)
            prop[c] = x[c] + np.exp(log_step) * linalg.solve_triangular(
                L, z[c], lower=True, trans="T", check_finite=False)
        lp_prop = target.latent(prop, s)
        acc = np.log(rng.random(chains)) < lp_prop - lp
        x = np.where(acc[:, None], prop, x)
        lp = np.where(acc, lp_prop, lp)
        if adapting:
            log_step += (acc.mean() - 0.234) / np.sqrt(it + 1) ** 0.6
        else:
            acc_lat.append(acc.mean())
        # log sigmas | latents: only the random-effect terms change
        for col, sl in ((0, lay.gamma_slice), (1, lay.delta_slice)):
            u = x[:, sl]
            ss, k = (u * u).sum(axis=1), u.shape[1]
            start = cur = target.sigma_terms(ss, k, s[:, col])
            hits = 0.0
            for _ in range(hyper_steps):
                s_new = s[:, col] + np.exp(log_hstep[col]) * rng.standard_normal(chains)
                new = target.sigma_terms(ss, k, s_new)
                ok = np.log(rng.random(chains)) < new - cur
                s[ok, col] = s_new[ok]
                cur = np.where(ok, new, cur)
                hits += ok.mean()
            lp += cur - start
            if adapting:
                log_hstep[col] += (hits / hyper_steps - 0.44) / np.sqrt(it + 1) ** 0.6
            else:
                acc_hyp.append(hits / hyper_steps)
        if not adapting and (it - warmup + 1) % thin == 0:
            k = (it - warmup + 1) // thin - 1
            out[:, k, :n_lat] = x
            out[:, k, n_lat:] = s
    return OracleResult(
        draws=out,
        names=lay.parameter_names(),
        rhat=split_rhat(out),
        ess=ess(out),
        acceptance={"latent": float(np.mean(acc_lat)) if acc_lat else float("nan"),
                    "hyper": float(np.mean(acc_hyp)) if acc_hyp else float("nan")},
        seed=int(seed),
        settings={"chains": chains, "iterations": iterations, "warmup": warmup,
                  "thin": thin, "hyper_steps": hyper_steps},
    )


# ---------------------------------------------------------------------------
# Diagnostics


def _split(draws):
    draws = np.asarray(draws, float)
    if draws.ndim == 2:
        draws = draws[:, :, None]
    n = draws.shape[1] // 2
    return np.concatenate([draws[:, :n], draws[:, draws.shape[1] - n:]], axis=0)


def split_rhat(draws) -> np.ndarray:
    """Split-chain potential scale reduction factor per coordinate.

    ``draws`` has shape ``(chains, iterations[, params])``.
    """
    x = _split(draws)
    m, n = x.shape[:2]
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = n * x.mean(axis=1).var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    return np.where(W > 0, r, np.where(B > 0, np.inf, 1.0))


def _autocov(x):
    """Autocovariance along axis 1 for each chain, via FFT."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=1)
    ac = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return ac / n


def ess(draws) -> np.ndarray:
    """Multi-chain effective sample size with Geyer's initial monotone sequence."""
    x = _split(draws)
    m, n = x.shape[:2]
    out = np.empty(x.shape[2])
    for k in range(x.shape[2]):
        xk = x[:, :, k]
        acov = _autocov(xk)
        W = xk.var(axis=1, ddof=1).mean()
        B = n * xk.mean(axis=1).var(ddof=1)
        var_plus = (n - 1) / n * W + B / n
        if var_plus <= 0:
            out[k] = float(m * n)
            continue
        rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
        rho[0] = 1.0
        # Sum over positive pairs, enforcing monotonicity.
        tau = -1.0
        prev = np.inf
        for t in range(0, n - 1, 2):
            pair = rho[t] + rho[t + 1]
            if pair < 0:
                break
            pair = min(pair, prev)
            prev = pair
            tau += 2.0 * pair
        out[k] = m * n / max(tau, 1.0 / np.log10(max(m * n, 10)))
    return out


def compare_with_laplace(fitted, oracle: OracleResult, tolerance: float = 0.1,
                         coordinates: str = "fixed") -> pd.DataFrame:
    """Standardized differences between Laplace and sampler means.

    Refuses (``OracleDisagreement``) when the sampler has not converged.
    Columns: name, laplace_mean, mcmc_mean, mcmc_sd, std_diff, ok.
    """
    if not oracle.converged:
        raise OracleDisagreement(
            f"sampler not converged (max R-hat {oracle.max_rhat:.3f}); flagged: {oracle.flagged()}")
    lay = fitted.layout
    sl = lay.beta_slice if coordinates == "fixed" else slice(0, lay.n_latent)
    lap = fitted.latent_mean()[sl]
    mc_mean = oracle.mean()[sl]
    mc_sd = oracle.sd()[sl]
    diff = np.abs(lap - mc_mean) / mc_sd
    return pd.DataFrame({"name": oracle.names[sl], "laplace_mean": lap, "mcmc_mean": mc_mean,
                         "mcmc_sd": mc_sd, "mcmc_ess": oracle.ess[sl], "std_diff": diff,
                         "ok": diff < tolerance})
