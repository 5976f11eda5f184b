"""Run configuration: JSON schema, defaults, overrides and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .errors import ValidationError
from .intervention import InterventionDefinition

SENSITIVITY_DEFINITIONS = [
    {"type": "introduction"},
    {"type": "awareness", "pct": 5},
    {"type": "awareness", "pct": 15},
    {"type": "awareness", "pct": 25},
    {"type": "awareness", "pct": 35},
    {"type": "awareness", "pct": 45},
]

_DEFINITION = {
    "type": "object",
    "properties": {
        "type": {"enum": ["awareness", "introduction"]},
        "pct": {"type": "number", "exclusiveMinimum": 0, "maximum": 100},
    },
    "required": ["type"],
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string", "minLength": 1},
        "data": {
            "type": "object",
            "properties": {
                "responses": {"type": "string"},
                "areas": {"type": "string"},
                "rollout": {"type": "string"},
                "dictionary": {"type": ["string", "null"]},
            },
            "additionalProperties": False,
        },
        "study_window": {
            "type": "object",
            "properties": {"start": {"type": "integer"}, "end": {"type": "integer"}},
            "required": ["start", "end"],
            "additionalProperties": False,
        },
        "simulate": {
            "type": "object",
            "properties": {
                "scenario": {"type": "string"},
                "overrides": {"type": "object"},
            },
            "required": ["scenario"],
            "additionalProperties": False,
        },
        "intervention": _DEFINITION,
        "sensitivity": {
            "type": "object",
            "properties": {"definitions": {"type": "array", "items": _DEFINITION, "minItems": 1}},
            "additionalProperties": False,
        },
        "weights": {
            "type": "object",
            "properties": {
                "covariates": {"type": "array", "items": {"type": "string"}},
                "floor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
            "additionalProperties": False,
        },
        "priors": {
            "type": "object",
            "properties": {
                "fixed_effect_variance": {"type": "number", "exclusiveMinimum": 0},
                "intercept_variance": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "pc_u": {"type": "number", "exclusiveMinimum": 0},
                "pc_alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "sum_to_zero_precision": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "inference": {
            "type": "object",
            "properties": {
                "draws": {"type": "integer", "minimum": 0},
                "grid_points": {"type": "integer", "minimum": 1},
                "grid_spacing": {"type": "number", "exclusiveMinimum": 0},
                "grid_bounds": {"type": "array", "items": {"type": "number"},
                                "minItems": 2, "maxItems": 2},
                "edge_drop": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "mean_correction": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "effects": {
            "type": "object",
            "properties": {
                "aggregation": {"enum": ["linear", "probability"]},
                "adjustment": {"enum": ["multiplicative", "additive"]},
                "profiles": {"type": "array", "items": {"type": "string"}},
                "joint": {"type": "array",
                          "items": {"type": "array", "items": {"type": "string"},
                                    "minItems": 2, "maxItems": 2}},
                "top_n": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "validate": {
            "type": "object",
            "properties": {
                "scenario": {"type": "string"},
                "chains": {"type": "integer", "minimum": 2},
                "iterations": {"type": "integer", "minimum": 10},
                "warmup": {"type": "integer", "minimum": 0},
                "thin": {"type": "integer", "minimum": 1},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "required": ["seed", "output_dir"],
    "additionalProperties": False,
}

DEFAULTS = {
    "intervention": {"type": "awareness", "pct": 25},
    "sensitivity": {"definitions": SENSITIVITY_DEFINITIONS},
    "weights": {"covariates": ["age_band", "education", "ethnicity", "marital_status", "sex"],
                "floor": 0.01},
    "priors": {"fixed_effect_variance": 1000.0, "intercept_variance": None, "pc_u": 1.0,
               "pc_alpha": 0.1, "sum_to_zero_precision": 1e6},
    "inference": {"draws": 1000, "grid_points": 5, "grid_spacing": 0.5,
                  "grid_bounds": [-4.0, 3.0], "edge_drop": 2.5, "mean_correction": True},
    "effects": {"aggregation": "linear", "adjustment": "multiplicative",
                "profiles": ["age_band", "education", "ethnicity", "marital_status", "sex",
                             "deprivation_decile", "ethnic_mix_quintile"],
                "joint": [["deprivation_decile", "ethnic_mix_quintile"]],
                "top_n": 5},
    "validate": {"scenario": "DESK_ORACLE", "chains": 4, "iterations": 200000, "warmup": 4000,
                 "thin": 20, "tolerance": 0.1},
}


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.raw[key]

    def get(self, key, default=None):
        return self.raw.get(key, default)

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.raw["output_dir"])

    @property
    def definition(self) -> InterventionDefinition:
        return InterventionDefinition.from_dict(self.raw["intervention"])

    @property
    def definitions(self) -> list:
        return [InterventionDefinition.from_dict(d) for d in self.raw["sensitivity"]["definitions"]]

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def hash(self) -> str:
        return config_hash(self.raw)


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(raw: dict) -> dict:
    """Schema-check ``raw`` and fill defaults; raises ValidationError."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"config error at {where}: {exc.message}") from None
    cfg = _merge(DEFAULTS, raw)
    if "data" not in cfg and "simulate" not in cfg:
        raise ValidationError("config needs a 'data' section or a 'simulate' section")
    lo, hi = cfg["inference"]["grid_bounds"]
    if not lo < hi:
        raise ValidationError("inference.grid_bounds must be increasing")
    if "study_window" in cfg and cfg["study_window"]["end"] < cfg["study_window"]["start"]:
        raise ValidationError("study_window end precedes start")
    # Definitions are validated again by their own constructor.
    for d in [cfg["intervention"], *cfg["sensitivity"]["definitions"]]:
        InterventionDefinition.from_dict(d)
    return cfg


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return from_dict(raw, path.parent, overrides)


def from_dict(raw: dict, base_dir=".", overrides: dict | None = None) -> RunConfig:
    raw = apply_overrides(raw, overrides or {})
    return RunConfig(validate_config(raw), Path(base_dir))


def apply_overrides(raw: dict, overrides: dict) -> dict:
    """Apply command-line overrides (seed, draws, threshold_pct, out)."""
    raw = copy.deepcopy(raw)
    if overrides.get("seed") is not None:
        raw["seed"] = overrides["seed"]
    if overrides.get("draws") is not None:
        raw.setdefault("inference", {})["draws"] = overrides["draws"]
    if overrides.get("threshold_pct") is not None:
        raw["intervention"] = {"type": "awareness", "pct": overrides["threshold_pct"]}
    if overrides.get("out") is not None:
        raw["output_dir"] = str(overrides["out"])
    return raw


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical config, ignoring where outputs are written."""
    payload = {k: v for k, v in raw.items() if k != "output_dir"}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()
