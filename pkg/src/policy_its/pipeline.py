"""Pipeline stages behind the command-line interface.

Layout of ``output_dir``::

    data/            simulated inputs (responses, rollout, areas, truth)
    fit/             posterior artifacts and fit summaries per definition
    effects/<def>/   trend, rho and sweep tables plus plot data
    sensitivity/     side-by-side comparison across definitions
    validate/        Laplace versus MCMC comparison
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .cohort import (
    AreaAttributes, StudyWindow, build_cohort, load_dictionary, read_areas, read_responses, DataDictionary,
)
from .config import RunConfig, canonical_json
from .effects import (
    EMPTY, LinearPredictor, ProfileQuery, area_sweep, profile_sweep, standardised_change,
    trend_table,
)
from .errors import OracleDisagreement, ValidationError
from .inference import GridSettings, file_sha256, fit_posterior, load_fitted, save_fitted
from .intervention import (
    InterventionDefinition, derive_timelines, never_count, read_rollout, rollout_from_frame,
    rollout_to_frame,
)
from .mcmc import compare_with_laplace, mcmc_oracle
from .model import PriorSpec, build_design
from . import synth

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"


# ---------------------------------------------------------------------------
# Output helpers


def stamp(cfg: RunConfig, manifest: str | None = None) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, "engine_version": __version__,
            "layout_manifest": manifest}


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(obj) else float(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if obj is pd.NA:
        return None
    return obj


def write_json(path: Path, payload: dict, meta: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"meta": meta} | _clean(payload)
    path.write_text(json.dumps(body, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def write_csv(path: Path, frame: pd.DataFrame, meta: dict) -> Path:
    """CSV with ``# key: value`` provenance lines ahead of the header."""
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "".join(f"# {k}: {v}\n" for k, v in meta.items())
    body = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    path.write_text(header + body)
    return path


def read_table(path) -> pd.DataFrame:
    """Read a CSV written by :func:`write_csv`."""
    return pd.read_csv(path, comment="#")


# ---------------------------------------------------------------------------
# Inputs


@dataclass
class Inputs:
    responses: pd.DataFrame
    areas: list
    rollout: list
    window: StudyWindow
    dictionary: DataDictionary
    digests: dict


def data_paths(cfg: RunConfig) -> dict:
    """Input paths from the config, defaulting to the simulate outputs."""
    data = cfg.get("data", {})
    default = cfg.output_dir / "data"
    return {k: cfg.resolve(data[k]) if k in data else default / f"{k}.csv"
            for k in ("responses", "areas", "rollout")}


def study_window(cfg: RunConfig) -> StudyWindow:
    if "study_window" in cfg.raw:
        return StudyWindow(cfg["study_window"]["start"], cfg["study_window"]["end"])
    if "simulate" in cfg.raw:
        return scenario_config(cfg).window
    raise ValidationError("config needs study_window when no simulate section is given")


def load_inputs(cfg: RunConfig) -> Inputs:
    paths = data_paths(cfg)
    for name, p in paths.items():
        if not p.exists():
            raise ValidationError(f"{name} file {p} not found (run simulate first or set data.{name})")
    dict_path = cfg.get("data", {}).get("dictionary")
    dictionary = load_dictionary(cfg.resolve(dict_path) if dict_path else None)
    return Inputs(
        responses=read_responses(paths["responses"]),
        areas=read_areas(paths["areas"]),
        rollout=read_rollout(paths["rollout"]),
        window=study_window(cfg),
        dictionary=dictionary,
        digests={k: file_sha256(p) for k, p in paths.items()},
    )


def priors(cfg: RunConfig) -> PriorSpec:
    return PriorSpec(**cfg["priors"])


def grid_settings(cfg: RunConfig) -> GridSettings:
    inf = cfg["inference"]
    return GridSettings(points=inf["grid_points"], spacing=inf["grid_spacing"],
                        bounds=tuple(inf["grid_bounds"]), edge_drop=inf["edge_drop"],
                        mean_correction=inf["mean_correction"])


def prepare(cfg: RunConfig, inputs: Inputs, definition: InterventionDefinition):
    """Cohort, timelines and design for one intervention definition."""
    w = cfg["weights"]
    cohort = build_cohort(inputs.responses, inputs.areas, inputs.window, inputs.dictionary,
                          weight_covariates=w["covariates"], weight_floor=w["floor"])
    timelines = derive_timelines(inputs.rollout, definition)
    design = build_design(cohort.observations, timelines, inputs.window, inputs.dictionary,
                          priors(cfg), definition.to_dict())
    return cohort, timelines, design


# ---------------------------------------------------------------------------
# simulate


def scenario_config(cfg: RunConfig) -> synth.ScenarioConfig:
    sim = cfg["simulate"]
    return synth.scenario(sim["scenario"], seed=cfg.seed, **sim.get("overrides", {}))


def run_simulate(cfg: RunConfig) -> dict:
    if "simulate" not in cfg.raw:
        raise ValidationError("config has no simulate section")
    data = synth.simulate(scenario_config(cfg))
    paths = data.write(cfg.output_dir / "data")
    return {k: str(p) for k, p in paths.items()}


# ---------------------------------------------------------------------------
# fit


def artifact_path(cfg: RunConfig, definition: InterventionDefinition) -> Path:
    return cfg.output_dir / "fit" / f"posterior_{definition.label}.zip"


def _relative(cfg: RunConfig, path: Path) -> str:
    try:
        return path.relative_to(cfg.output_dir).as_posix()
    except ValueError:
        return path.name


def fit_key(cfg: RunConfig, inputs: Inputs, definition: InterventionDefinition) -> str:
    """Identity of a fit: data digests plus every setting that changes the posterior."""
    payload = {"data": inputs.digests, "window": [inputs.window.start, inputs.window.end],
               "dictionary": inputs.dictionary.to_dict(), "weights": cfg["weights"],
               "priors": cfg["priors"], "inference": cfg["inference"],
               "definition": definition.to_dict(), "seed": cfg.seed}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


def run_fit(cfg: RunConfig, definition: InterventionDefinition | None = None,
            inputs: Inputs | None = None, reuse: bool = True):
    """Fit one definition; returns ``(fitted, artifact_path)``.

    An existing artifact with a matching fit key is reused.
    """
    definition = definition or cfg.definition
    inputs = inputs or load_inputs(cfg)
    key = fit_key(cfg, inputs, definition)
    path = artifact_path(cfg, definition)
    if reuse and path.exists():
        try:
            fitted = load_fitted(path)
            if fitted.meta.get("fit_key") == key:
                log.info("reusing %s", path)
                return fitted, path
        except ValidationError:
            pass
    cohort, timelines, design = prepare(cfg, inputs, definition)
    fitted = fit_posterior(design, priors(cfg), grid_settings(cfg),
                           n_draws=cfg["inference"]["draws"], seed=cfg.seed)
    fitted.meta = {
        "config_hash": cfg.hash(),
        "fit_key": key,
        "definition": definition.to_dict(),
        "dictionary": inputs.dictionary.to_dict(),
        "n_raw": cohort.n_raw,
        "exclusions": dict(sorted(cohort.exclusions.items())),
        "never_aware_areas": never_count(timelines),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = save_fitted(fitted, path)
    _write_fit_summary(cfg, fitted, path, digest)
    return fitted, path


def _write_fit_summary(cfg, fitted, path, digest):
    label = Path(path).stem.removeprefix("posterior_")
    manifest = f"{_relative(cfg, Path(path))}#meta.json:layout"
    meta = stamp(cfg, manifest)
    fixed = fitted.fixed_effects_summary()
    write_csv(cfg.output_dir / "fit" / f"fixed_effects_{label}.csv", fixed, meta)
    sigma = np.exp(fitted.grid_points)
    write_json(cfg.output_dir / "fit" / f"fit_summary_{label}.json", {
        "artifact": _relative(cfg, Path(path)),
        "artifact_sha256": digest,
        "definition": fitted.meta["definition"],
        "n_observations": int(len(fitted.frame)),
        "n_raw": fitted.meta["n_raw"],
        "exclusions": fitted.meta["exclusions"],
        "never_aware_areas": fitted.meta["never_aware_areas"],
        "hyper_optimum": {"log_sigma_gamma": fitted.diagnostics["optimum"][0],
                          "log_sigma_delta": fitted.diagnostics["optimum"][1]},
        "sigma_posterior_mean": {"sigma_gamma": float(fitted.grid_weights @ sigma[:, 0]),
                                 "sigma_delta": float(fitted.grid_weights @ sigma[:, 1])},
        "grid_shape": fitted.diagnostics["grid_shape"],
        "max_condition_number": fitted.diagnostics["max_condition_number"],
        "n_draws": fitted.n_draws,
    }, meta)


# ---------------------------------------------------------------------------
# effects


def design_from_fitted(fitted):
    """Rebuild the design stored with an artifact, checking it matches the layout."""
    if fitted.frame is None:
        raise ValidationError("artifact carries no observation frame")
    lay = fitted.layout
    frame = fitted.frame
    dictionary = DataDictionary.from_dict(fitted.meta["dictionary"])
    aware = {}
    for area, year in zip(frame["area_id"].astype(str), frame["awareness_year"]):
        aware[area] = None if pd.isna(year) else int(year)
    cols = [c for c in frame.columns if c not in ("year", "intervention", "year_post", "t", "l",
                                                  "awareness_year")]
    design = build_design(frame[cols], aware, StudyWindow(*lay.window), dictionary,
                          PriorSpec(**lay.priors), lay.definition)
    if design.layout.to_dict() != lay.to_dict():
        raise ValidationError("artifact layout does not match its stored observations")
    return design


def run_effects(cfg: RunConfig, artifact=None, definition: InterventionDefinition | None = None):
    """Write effect tables and plot data for one fitted definition."""
    definition = definition or cfg.definition
    path = Path(artifact) if artifact else artifact_path(cfg, definition)
    if not path.exists():
        raise ValidationError(f"artifact {path} not found (run fit first)")
    fitted = load_fitted(path)
    design = design_from_fitted(fitted)
    label = InterventionDefinition.from_dict(fitted.meta["definition"]).label
    pred = LinearPredictor.from_fitted(fitted, design)
    opts = {"adjustment": cfg["effects"]["adjustment"],
            "aggregation": cfg["effects"]["aggregation"]}
    out = cfg.output_dir / "effects" / label
    meta = stamp(cfg, f"{_relative(cfg, path)}#meta.json:layout")
    meta |= {"percentile_method": "type 7 (linear interpolation)", "interval": "95% equal-tailed",
             "aggregation": opts["aggregation"], "adjustment": opts["adjustment"]}

    trend, trend_draws = trend_table(pred, aggregation=opts["aggregation"], return_draws=True)
    write_csv(out / "national_trend.csv", trend, meta)
    write_csv(out / "national_trend_draws.csv", trend_draws, meta)

    national = standardised_change(pred, ProfileQuery(), label="national", **opts)
    write_json(out / "national_rho.json", national.row() | {"n_draws": pred.n_draws}, meta)

    areas = area_sweep(pred, fitted.layout.areas, **opts)
    write_csv(out / "area_rho.csv", areas, meta)

    dictionary = DataDictionary.from_dict(fitted.meta["dictionary"])
    dims = cfg["effects"]["profiles"]
    levels = {d: dictionary.levels[d] for d in dims if d in dictionary.levels}
    profiles = profile_sweep(pred, dims, levels=levels, **opts)
    write_csv(out / "profile_rho.csv", profiles, meta)

    joints = []
    for a, b in cfg["effects"]["joint"]:
        lv = {d: dictionary.levels[d] for d in (a, b) if d in dictionary.levels}
        cells = profile_sweep(pred, [a, b], levels=lv, joint=True, **opts)
        cells.insert(0, "dimensions", f"{a}x{b}")
        cells = cells.rename(columns={a: "level_1", b: "level_2"})
        joints.append(cells)
    joint = pd.concat(joints, ignore_index=True) if joints else pd.DataFrame()
    write_csv(out / "joint_rho.csv", joint, meta)

    top_n = cfg["effects"]["top_n"]
    if len(joint):
        populated = joint[joint["status"] != EMPTY]
        top = populated.head(top_n).assign(rank_group="largest")
        bottom = populated.tail(top_n).iloc[::-1].assign(rank_group="smallest")
        write_csv(out / "top_bottom_profiles.csv", pd.concat([top, bottom], ignore_index=True), meta)

    _write_plot_data(out, meta, trend, national, areas, profiles, joint)
    return out


def _write_plot_data(out, meta, trend, national, areas, profiles, joint):
    yearly = trend[trend["year"].notna()]
    write_json(out / "plot_national_trend.json", {
        "year": yearly["year"].astype(int).tolist(),
        **{c: yearly[c].tolist() for c in yearly.columns
           if c.startswith(("exposed_", "control_", "ratio_"))},
        "national_rho": national.rho.as_dict(),
    }, meta)
    write_json(out / "plot_area_rho.json", {
        "area_id": areas["area_id"].astype(str).tolist(),
        "status": areas["status"].tolist(),
        **{c: areas[c].tolist() for c in ("rho_lower", "rho_median", "rho_upper")},
    }, meta)
    write_json(out / "plot_profiles.json", {
        "dimension": profiles["dimension"].tolist(),
        "level": profiles["level"].astype(str).tolist(),
        "status": profiles["status"].tolist(),
        **{c: profiles[c].tolist() for c in ("rho_lower", "rho_median", "rho_upper")},
    }, meta)
    if len(joint):
        write_json(out / "plot_joint_tiles.json", {
            "dimensions": joint["dimensions"].tolist(),
            "level_1": joint["level_1"].astype(str).tolist(),
            "level_2": joint["level_2"].astype(str).tolist(),
            "status": joint["status"].tolist(),
            "rho_median": joint["rho_median"].tolist(),
        }, meta)


# ---------------------------------------------------------------------------
# sensitivity


def run_sensitivity(cfg: RunConfig) -> Path:
    """One fit and effects run per definition, aligned on centered year."""
    inputs = load_inputs(cfg)
    trends, rhos = [], []
    for definition in cfg.definitions:
        _, path = run_fit(cfg, definition, inputs)
        eff_dir = run_effects(cfg, path, definition)
        trend = read_table(eff_dir / "national_trend.csv")
        trends.append(trend.assign(definition=definition.label))
        rho = json.loads((eff_dir / "national_rho.json").read_text())
        fit = json.loads((cfg.output_dir / "fit" / f"fit_summary_{definition.label}.json").read_text())
        rhos.append({"definition": definition.label, "status": rho["status"],
                     "rho_lower": rho["rho_lower"], "rho_median": rho["rho_median"],
                     "rho_upper": rho["rho_upper"],
                     "never_aware_areas": fit["never_aware_areas"],
                     **{f"n_{k}": rho[f"n_{k}"] for k in ("EA", "EB", "CA", "CB")}})
    labels = [d.label for d in cfg.definitions]
    long = pd.concat(trends, ignore_index=True)
    yearly = long[long["year"].notna()].copy()
    yearly["year"] = yearly["year"].astype(int)
    years = sorted(yearly["year"].unique())
    # Every definition gets a row for every centered year seen by any definition.
    grid = pd.MultiIndex.from_product([labels, years], names=["definition", "year"])
    aligned = (yearly.set_index(["definition", "year"]).reindex(grid).reset_index())
    aligned["status"] = aligned["status"].fillna(EMPTY)
    aligned = aligned.drop(columns=["period"])
    cols = ["year", "definition"] + [c for c in aligned.columns if c not in ("year", "definition")]
    aligned = aligned[cols].sort_values(["year", "definition"], key=_definition_order(labels),
                                        kind="stable")
    out = cfg.output_dir / "sensitivity"
    meta = stamp(cfg, ";".join(f"fit/posterior_{lab}.zip#meta.json:layout" for lab in labels))
    write_csv(out / "sensitivity_trend.csv", aligned, meta)
    wide = aligned.pivot(index="year", columns="definition", values="exposed_median")[labels]
    write_csv(out / "sensitivity_trend_wide.csv", wide.reset_index(), meta)
    write_csv(out / "sensitivity_rho.csv", pd.DataFrame(rhos), meta)
    return out


def _definition_order(labels):
    order = {lab: i for i, lab in enumerate(labels)}

    def key(col):
        return col.map(order) if col.name == "definition" else col
    return key


# ---------------------------------------------------------------------------
# validate


def run_validate(cfg: RunConfig) -> pd.DataFrame:
    """Fit a desk-scale synthetic instance both ways and compare fixed-effect means.

    Raises OracleDisagreement when the sampler has not converged or any
    fixed effect differs by ``tolerance`` posterior SDs or more.
    """
    v = cfg["validate"]
    scen = synth.scenario(v["scenario"], seed=cfg.seed)
    data = synth.simulate(scen)
    areas = [AreaAttributes(r.area_id, r.imd_score, r.ethnic_minority_proportion)
             for r in data.areas.itertuples()]
    cohort = build_cohort(data.responses, areas, scen.window,
                          weight_covariates=cfg["weights"]["covariates"],
                          weight_floor=cfg["weights"]["floor"])
    timelines = derive_timelines(rollout_from_frame(rollout_to_frame(data.rollout)),
                                 cfg.definition)
    design = build_design(cohort.observations, timelines, scen.window, priors=priors(cfg))
    fitted = fit_posterior(design, priors(cfg), grid_settings(cfg), n_draws=0, seed=cfg.seed)
    oracle = mcmc_oracle(design, priors=priors(cfg), chains=v["chains"],
                         iterations=v["iterations"], warmup=v["warmup"], thin=v["thin"],
                         seed=cfg.seed)
    out = cfg.output_dir / "validate"
    meta = stamp(cfg, None)
    summary = {"scenario": v["scenario"], "max_rhat": oracle.max_rhat,
               "min_ess": float(oracle.ess.min()), "flagged": oracle.flagged(),
               "acceptance": oracle.acceptance, "tolerance": v["tolerance"]}
    try:
        table = compare_with_laplace(fitted, oracle, v["tolerance"])
    except OracleDisagreement as exc:
        write_json(out / "oracle_summary.json", summary | {"status": "refused", "reason": str(exc)}, meta)
        raise
    write_csv(out / "oracle_comparison.csv", table, meta)
    ok = bool(table["ok"].all())
    write_json(out / "oracle_summary.json", summary | {
        "status": "agree" if ok else "disagree",
        "max_std_diff": float(table["std_diff"].max()),
    }, meta)
    if not ok:
        bad = table.loc[~table["ok"], "name"].tolist()
        raise OracleDisagreement(f"Laplace and MCMC means differ by >= {v['tolerance']} SD for {bad}")
    return table
