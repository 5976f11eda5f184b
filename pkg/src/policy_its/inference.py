"""MAP + Laplace fitting with a weighted hyperparameter grid.

For fixed ``(log sigma_gamma, log sigma_delta)`` the latent field is fitted
by Newton's method and approximated by a Gaussian at the mode. The
Laplace-approximate marginal log-likelihood of the hyperparameters is then
maximized, a grid is laid around the optimum, and posterior draws are taken
from the resulting mixture of Gaussians.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, optimize
from scipy.special import expit

from . import __version__
from .errors import ConvergenceError, IndefiniteHessianError, ValidationError
from .model import Design, Layout, LogPosterior, ParameterVector, PriorSpec

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
ARTIFACT_FORMAT = "policy-its-posterior"
ARTIFACT_VERSION = 1


@dataclass
class MapFit:
    """Mode of the latent field at fixed hyperparameters."""

    mode: np.ndarray
    information: np.ndarray
    chol: np.ndarray
    log_posterior: float
    log_sigma_gamma: float
    log_sigma_delta: float
    iterations: int
    trace: list = field(default_factory=list)

    @property
    def neg_hessian(self):
        return self.information

    @property
    def covariance(self):
        return linalg.cho_solve((self.chol, True), np.eye(len(self.mode)))

    @property
    def log_det_information(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def laplace_log_marginal(self):
        """``log p(y, mode, hypers) - 0.5 log|Q| + d/2 log(2 pi)``."""
        d = len(self.mode)
        return self.log_posterior - 0.5 * self.log_det_information + 0.5 * d * LOG_2PI


def _cholesky(Q):
    try:
        return linalg.cholesky(Q, lower=True, check_finite=True)
    except linalg.LinAlgError:
        return None


def fit_map(
    design: Design,
    outcomes=None,
    weights=None,
    priors: PriorSpec = PriorSpec(),
    log_sigma_gamma: float = 0.0,
    log_sigma_delta: float = 0.0,
    x0=None,
    tol: float = 1e-8,
    max_iter: int = 200,
    posterior: LogPosterior | None = None,
) -> MapFit:
    """Newton ascent on the latent field with backtracking line search.

    Stops when the gradient norm drops below ``tol``. When the Newton
    direction is unavailable or not an ascent direction, a quasi-Newton
    (L-BFGS) stage takes over before Newton resumes.
    """
    lp = posterior or LogPosterior(design, outcomes, weights, priors)
    sg, sd = float(log_sigma_gamma), float(log_sigma_delta)
    d = lp.layout.n_latent
    x = np.zeros(d) if x0 is None else np.array(x0, dtype=float)
    if x.shape != (d,):
        raise ValidationError(f"starting point has shape {x.shape}, expected ({d},)")

    def value(z):
        return lp.value(np.concatenate([z, [sg, sd]]))

    f, g = lp.latent_value_grad(x, sg, sd)
    trace = []
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        trace.append({"iter": it, "log_posterior": f, "grad_norm": gnorm})
        if gnorm < tol:
            break
        Q = lp.latent_information(x, sg, sd)
        L = _cholesky(Q)
        step = None if L is None else linalg.cho_solve((L, True), g)
        if step is None or not g @ step > 0:
            trace[-1]["fallback"] = "lbfgs"
            res = optimize.minimize(lambda z: -value(z), x, jac=lambda z: -lp.latent_value_grad(z, sg, sd)[1],
                                    method="L-BFGS-B", options={"maxiter": 200})
            x = res.x
            f, g = lp.latent_value_grad(x, sg, sd)
            continue
        slope = float(g @ step)
        t = 1.0
        while True:
            x_new = x + t * step
            f_new = value(x_new)
            if f_new >= f + 1e-4 * t * slope:
                break
            # Near the mode the gain falls below round-off; accept the full step.
            if t == 1.0 and abs(f_new - f) <= 1e-11 * max(1.0, abs(f)):
                break
            t *= 0.5
            if t < 1e-12:
                raise ConvergenceError("line search failed to find an ascent step", trace)
        x = x_new
        f, g = lp.latent_value_grad(x, sg, sd)
        trace[-1]["step"] = t
    else:
        raise ConvergenceError(
            f"Newton did not converge in {max_iter} iterations (grad norm {np.linalg.norm(g):.3g})",
            trace)

    Q = lp.latent_information(x, sg, sd)
    L = _cholesky(Q)
    if L is None:
        raise IndefiniteHessianError("negative Hessian at the mode is not positive definite", trace)
    return MapFit(mode=x, information=Q, chol=L, log_posterior=f, log_sigma_gamma=sg,
                  log_sigma_delta=sd, iterations=len(trace) - 1, trace=trace)


def skew_shift(lp: LogPosterior, fit: MapFit) -> np.ndarray:
    """First-order shift from the mode to the posterior mean of the latent field.

    Uses the third derivative of the Bernoulli log-likelihood:
    ``shift = 0.5 * S T[S]`` with ``S`` the Laplace covariance and
    ``T[S]_j = -sum_i w_i p_i (1 - p_i)(1 - 2 p_i) z_ij (z_i' S z_i)``.
    """
    Z = lp.design.Z
    S = fit.covariance
    p = expit(Z @ fit.mode)
    c3 = lp.w * p * (1.0 - p) * (1.0 - 2.0 * p)
    leverage = np.einsum("ij,jk,ik->i", Z, S, Z)
    return 0.5 * S @ (-(Z.T @ (c3 * leverage)))


# ---------------------------------------------------------------------------
# Hyperparameters


@dataclass
class GridSettings:
    points: int = 5
    spacing: float = 0.5
    bounds: tuple = (-4.0, 3.0)
    # Extend the grid while an edge is within this many log units of the peak.
    edge_drop: float | None = 2.5
    max_points: int = 15
    start: tuple = (np.log(0.3), np.log(0.3))
    # Center each grid point's Gaussian on the skewness-corrected mean.
    mean_correction: bool = True


@dataclass
class HyperGrid:
    points: np.ndarray          # (K, 2) log sigmas
    log_values: np.ndarray      # (K,)
    weights: np.ndarray         # (K,)
    fits: list                  # MapFit per point
    optimum: np.ndarray
    optimizer_trace: list

    @property
    def best(self):
        return int(np.argmax(self.log_values))


class _Marginal:
    """Laplace marginal log-likelihood with warm-started inner fits."""

    def __init__(self, lp: LogPosterior):
        self.lp = lp
        self.cache = {}
        self.x_last = None

    def fit(self, s, x0=None):
        key = (round(float(s[0]), 12), round(float(s[1]), 12))
        if key not in self.cache:
            start = x0 if x0 is not None else self.x_last
            fit = fit_map(self.lp.design, posterior=self.lp, log_sigma_gamma=s[0],
                          log_sigma_delta=s[1], x0=start)
            self.x_last = fit.mode
            self.cache[key] = fit
        return self.cache[key]

    def __call__(self, s):
        return self.fit(s).laplace_log_marginal()


def optimize_hyper(
    design: Design,
    outcomes=None,
    weights=None,
    priors: PriorSpec = PriorSpec(),
    settings: GridSettings = GridSettings(),
    posterior: LogPosterior | None = None,
) -> HyperGrid:
    """Locate the marginal mode of the log sigmas and weight a grid around it."""
    lp = posterior or LogPosterior(design, outcomes, weights, priors)
    marg = _Marginal(lp)
    lo, hi = settings.bounds
    trace = []

    def objective(s):
        val = marg(s)
        trace.append({"log_sigma_gamma": float(s[0]), "log_sigma_delta": float(s[1]),
                      "log_marginal": val})
        return -val

    def jac(s, h=1e-4):
        g = np.empty(2)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            up, dn = np.clip(s + e, lo, hi), np.clip(s - e, lo, hi)
            g[k] = (objective(up) - objective(dn)) / (up[k] - dn[k])
        return g

    start = np.clip(np.asarray(settings.start, float), lo, hi)
    res = optimize.minimize(objective, start, jac=jac, method="L-BFGS-B",
                            bounds=[(lo, hi), (lo, hi)],
                            options={"maxiter": 100, "ftol": 1e-10, "gtol": 1e-6})
    optimum = np.clip(res.x, lo, hi)
    best_fit = marg.fit(optimum)

    h = settings.spacing
    half = settings.points // 2

    def axis(center, n_lo, n_hi):
        pts = center + h * np.arange(-n_lo, n_hi + 1)
        pts = pts[(pts >= lo - 1e-12) & (pts <= hi + 1e-12)]
        return pts

    # Shift the nominal window inside the bounds so it keeps its size.
    centers = []
    for c in optimum:
        c = min(max(c, lo + half * h), hi - half * h) if hi - lo >= 2 * half * h else c
        centers.append(c)
    ext = [[half, half], [half, half]]
    values = {}

    def evaluate(ax0, ax1):
        for a in ax0:
            for b in ax1:
                key = (float(a), float(b))
                if key not in values:
                    values[key] = marg.fit(np.array(key), x0=best_fit.mode).laplace_log_marginal()

    while True:
        ax = [axis(centers[k], *ext[k]) for k in range(2)]
        evaluate(*ax)
        if settings.edge_drop is None:
            break
        grid = np.array([[values[(float(a), float(b))] for b in ax[1]] for a in ax[0]])
        peak = grid.max()
        grew = False
        edges = [(0, 0, grid[0, :]), (0, 1, grid[-1, :]), (1, 0, grid[:, 0]), (1, 1, grid[:, -1])]
        for dim, side, edge in edges:
            if edge.max() > peak - settings.edge_drop and sum(ext[dim]) + 1 < settings.max_points:
                bound_pt = ax[dim][0] - h if side == 0 else ax[dim][-1] + h
                if lo - 1e-12 <= bound_pt <= hi + 1e-12:
                    ext[dim][side] += 1
                    grew = True
        if not grew:
            break

    ax = [axis(centers[k], *ext[k]) for k in range(2)]
    points = np.array([(a, b) for a in ax[0] for b in ax[1]], dtype=float)
    log_values = np.array([values[(float(a), float(b))] for a, b in points])
    w = np.exp(log_values - log_values.max())
    w /= w.sum()
    fits = [marg.fit(p) for p in points]
    return HyperGrid(points=points, log_values=log_values, weights=w, fits=fits,
                     optimum=optimum, optimizer_trace=trace)


# ---------------------------------------------------------------------------
# Posterior object and draws


@dataclass
class FittedPosterior:
    layout: Layout
    map_point: ParameterVector
    laplace_cov: np.ndarray
    grid_points: np.ndarray
    grid_log_values: np.ndarray
    grid_weights: np.ndarray
    grid_modes: np.ndarray
    grid_means: np.ndarray
    grid_chols: np.ndarray
    draws: np.ndarray
    seed: int
    frame: pd.DataFrame | None = None
    diagnostics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return self.draws.shape[0]

    def latent_mean(self):
        """Mean of the Gaussian mixture over the latent field."""
        return self.grid_weights @ self.grid_means

    def latent_cov(self):
        m = self.latent_mean()
        d = len(m)
        cov = np.zeros((d, d))
        for w, mean, L in zip(self.grid_weights, self.grid_means, self.grid_chols):
            cov += w * (linalg.cho_solve((L, True), np.eye(d)) + np.outer(mean, mean))
        return cov - np.outer(m, m)

    def hyper_mean(self):
        return self.grid_weights @ self.grid_points

    def fixed_effects_summary(self):
        lay = self.layout
        mean = self.latent_mean()[lay.beta_slice]
        sd = np.sqrt(np.diag(self.latent_cov())[lay.beta_slice])
        return pd.DataFrame({"name": lay.fixed_effects, "mean": mean, "sd": sd})


def fit_posterior(
    design: Design,
    priors: PriorSpec = PriorSpec(),
    settings: GridSettings = GridSettings(),
    n_draws: int = 1000,
    seed: int = 0,
    outcomes=None,
    weights=None,
) -> FittedPosterior:
    """Full fit: hyperparameter optimization, grid, Laplace mixture and draws."""
    lp = LogPosterior(design, outcomes, weights, priors)
    grid = optimize_hyper(design, priors=priors, settings=settings, posterior=lp)
    best = grid.fits[grid.best]
    opt_fit = _Marginal(lp).fit(grid.optimum, x0=best.mode)
    map_point = ParameterVector.from_array(
        np.concatenate([opt_fit.mode, grid.optimum]), design.layout)
    conds = [float(np.linalg.cond(f.information)) for f in grid.fits]
    modes = np.array([f.mode for f in grid.fits])
    if settings.mean_correction:
        means = np.array([f.mode + skew_shift(lp, f) for f in grid.fits])
    else:
        means = modes.copy()
    fitted = FittedPosterior(
        layout=design.layout,
        map_point=map_point,
        laplace_cov=opt_fit.covariance,
        grid_points=grid.points,
        grid_log_values=grid.log_values,
        grid_weights=grid.weights,
        grid_modes=modes,
        grid_means=means,
        grid_chols=np.array([f.chol for f in grid.fits]),
        draws=np.zeros((0, design.layout.n_params)),
        seed=int(seed),
        frame=design.frame,
        diagnostics={
            "optimizer_trace": grid.optimizer_trace,
            "newton_iterations": [f.iterations for f in grid.fits],
            "condition_numbers": conds,
            "max_condition_number": max(conds),
            "optimum": [float(v) for v in grid.optimum],
            "grid_shape": [len(np.unique(grid.points[:, 0])), len(np.unique(grid.points[:, 1]))],
            "mean_correction": bool(settings.mean_correction),
        },
    )
    fitted.draws = draw_posterior(fitted, n_draws, seed)
    return fitted


def draw_posterior(fitted: FittedPosterior, n: int, seed: int) -> np.ndarray:
    """``n`` draws of the full parameter vector, shape ``(n, n_params)``.

    Draw ``i`` depends only on ``(seed, i)``: a grid point is chosen by weight
    and the latent field sampled from that point's Gaussian (centered on
    ``grid_means``, which equal the modes when mean correction is off).
    """
    lay = fitted.layout
    out = np.empty((n, lay.n_params))
    if n == 0:
        return out
    cum = np.cumsum(fitted.grid_weights)
    cum[-1] = 1.0
    for i in range(n):
        rng = np.random.default_rng([int(seed), i])
        k = int(np.searchsorted(cum, rng.random(), side="right"))
        z = rng.standard_normal(lay.n_latent)
        # x = mean + L^{-T} z has covariance Q^{-1} when Q = L L^T. Solving one
        # vector at a time keeps each draw independent of the batch size.
        dev = linalg.solve_triangular(fitted.grid_chols[k], z, lower=True, trans="T")
        out[i, : lay.n_latent] = fitted.grid_means[k] + dev
        out[i, lay.n_latent:] = fitted.grid_points[k]
    return out


# ---------------------------------------------------------------------------
# Artifact I/O


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _zip_write(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


ARRAYS = ("laplace_cov", "grid_points", "grid_log_values", "grid_weights", "grid_modes",
          "grid_means", "grid_chols", "draws")


def save_fitted(fitted: FittedPosterior, path) -> str:
    """Write a byte-reproducible artifact; returns its SHA-256."""
    meta = {
        "format": ARTIFACT_FORMAT,
        "artifact_version": ARTIFACT_VERSION,
        "engine_version": __version__,
        "layout": fitted.layout.to_dict(),
        "map_point": fitted.map_point.to_array().tolist(),
        "seed": fitted.seed,
        "diagnostics": fitted.diagnostics,
        **fitted.meta,
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True, default=float))
        for name in ARRAYS:
            _zip_write(zf, f"{name}.npy", _npy_bytes(getattr(fitted, name)))
        if fitted.frame is not None:
            _zip_write(zf, "frame.csv", fitted.frame.to_csv(index=False, float_format="%.17g",
                                                            lineterminator="\n"))
    return file_sha256(path)


def load_fitted(path) -> FittedPosterior:
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile:
        raise ValidationError(f"{path} is not a posterior artifact") from None
    with zf:
        if "meta.json" not in zf.namelist():
            raise ValidationError(f"{path} is not a posterior artifact")
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != ARTIFACT_FORMAT:
            raise ValidationError(f"{path} is not a posterior artifact")
        if meta.get("artifact_version") != ARTIFACT_VERSION:
            raise ValidationError(f"unsupported artifact version {meta.get('artifact_version')}")
        arrays = {n: np.load(io.BytesIO(zf.read(f"{n}.npy")), allow_pickle=False) for n in ARRAYS}
        frame = None
        if "frame.csv" in zf.namelist():
            frame = pd.read_csv(io.BytesIO(zf.read("frame.csv")),
                                dtype={"person_id": str, "area_id": str})
    layout = Layout.from_dict(meta.pop("layout"))
    map_point = ParameterVector.from_array(meta.pop("map_point"), layout)
    seed = meta.pop("seed")
    diagnostics = meta.pop("diagnostics")
    return FittedPosterior(layout=layout, map_point=map_point, seed=seed, frame=frame,
                           diagnostics=diagnostics, meta=meta, **arrays)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
