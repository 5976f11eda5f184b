"""Shared builders for the test suite."""

import numpy as np
import pandas as pd

from policy_its import cohort, intervention, model, synth


def toy_design(X, y, w=None, t=None, l=None, names=None, n_years=1, n_areas=1):
    """Design over an arbitrary fixed-effect matrix with one-hot random effects."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    t = np.zeros(n, dtype=np.int64) if t is None else np.asarray(t, dtype=np.int64)
    l = np.zeros(n, dtype=np.int64) if l is None else np.asarray(l, dtype=np.int64)
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    layout = model.Layout(
        fixed_effects=names or [f"x{k}" for k in range(p)],
        reference_levels={},
        years=list(range(n_years)),
        areas=[f"A{k}" for k in range(n_areas)],
    )
    frame = pd.DataFrame({"outcome": np.asarray(y, dtype=float), "weight": w})
    return model.Design(X=X, t_index=t, l_index=l, layout=layout, frame=frame)


def random_toy(rng, n=40, p=3, n_years=3, n_areas=4):
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    y = rng.integers(0, 2, n)
    w = rng.uniform(0.5, 2.0, n)
    return toy_design(X, y, w, rng.integers(0, n_years, n), rng.integers(0, n_areas, n),
                      n_years=n_years, n_areas=n_areas)


def area_records(areas_frame):
    return [cohort.AreaAttributes(r.area_id, r.imd_score, r.ethnic_minority_proportion)
            for r in areas_frame.itertuples()]


def simulated_design(name, seed, definition=None, **overrides):
    """Simulate a scenario and push it through cohort, intervention and model."""
    cfg = synth.scenario(name, seed=seed, **overrides)
    sim = synth.simulate(cfg)
    c = cohort.build_cohort(sim.responses, area_records(sim.areas), cfg.window)
    definition = definition or intervention.InterventionDefinition()
    timelines = intervention.derive_timelines(sim.rollout, definition)
    return model.build_design(c.observations, timelines, cfg.window), sim, cfg


def random_theta(rng, layout, scale=0.3):
    """Random parameters with nearly centered random effects.

    The sum-to-zero penalty is very stiff, so realistic points keep each
    random-effect block summing to about zero (a small residual is left so
    the penalty still contributes).
    """
    theta = scale * rng.standard_normal(layout.n_params)
    for sl in (layout.gamma_slice, layout.delta_slice):
        u = theta[sl]
        if len(u):
            theta[sl] = u - u.mean() + 1e-5 * rng.standard_normal() / len(u)
    theta[-2:] = rng.uniform(-1.5, 0.5, 2)
    return theta


def _months(start, n):
    year, month = int(start[:4]), int(start[5:])
    out = []
    for _ in range(n):
        out.append(f"{year:04d}-{month:02d}")
        year, month = (year + 1, 1) if month == 12 else (year, month + 1)
    return out


# Hand-computed onset months: (start month, counts, {threshold: month or None},
# introduction month). Thresholds are percentages of the final count.
ROLLOUT_FIXTURES = [
    ("2020-01", [0, 2, 10, 30, 60, 100],
     {5: "2020-03", 15: "2020-04", 25: "2020-04", 35: "2020-05", 45: "2020-05"}, "2020-02"),
    ("2020-01", [5, 5, 5, 5, 5, 5],
     {5: "2020-01", 15: "2020-01", 25: "2020-01", 35: "2020-01", 45: "2020-01"}, "2020-01"),
    ("2020-01", [0, 0, 0, 0, 0, 0],
     {5: None, 15: None, 25: None, 35: None, 45: None}, None),
    ("2020-01", [0, 0, 0, 0, 0, 40],
     {5: "2020-06", 15: "2020-06", 25: "2020-06", 35: "2020-06", 45: "2020-06"}, "2020-06"),
    ("2020-01", [0, 50, 10, 20, 30, 100],
     {5: "2020-02", 15: "2020-02", 25: "2020-02", 35: "2020-02", 45: "2020-02"}, "2020-02"),
    ("2020-01", [1, 3, 7, 15, 20, 200],
     {5: "2020-04", 15: "2020-06", 25: "2020-06", 35: "2020-06", 45: "2020-06"}, "2020-01"),
    ("2020-01", [10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
     {5: "2020-01", 15: "2020-02", 25: "2020-03", 35: "2020-04", 45: "2020-05"}, "2020-01"),
    ("2020-01", [4, 9, 14, 24, 34, 44, 100],
     {5: "2020-02", 15: "2020-04", 25: "2020-05", 35: "2020-06", 45: "2020-07"}, "2020-01"),
    ("2020-01", [5, 15, 25, 35, 45, 100],
     {5: "2020-01", 15: "2020-02", 25: "2020-03", 35: "2020-04", 45: "2020-05"}, "2020-01"),
    ("2019-11", [0, 0, 3, 8, 12, 20, 40],
     {5: "2020-01", 15: "2020-02", 25: "2020-03", 35: "2020-04", 45: "2020-04"}, "2020-01"),
]


def fixture_series(k):
    start, counts, _, _ = ROLLOUT_FIXTURES[k]
    return intervention.RolloutSeries(f"F{k}", tuple(_months(start, len(counts))), tuple(counts))
