"""Run configuration: defaults, JSON-schema validation and merging.

Every section rejects unknown keys so that typos fail before any work is
done.  The resolved document (defaults merged with the user's file and CLI
overrides) is what the commands consume and what gets written next to the
outputs.
"""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

import jsonschema

from .models import KINDS, ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _surrogate_defaults(mode: str) -> dict:
    return {
        "n": 29 if mode == "heating" else 28,
        "k_mean": 2.0,
        "k_sd": 0.3,
        "t0_range": [15.0, 22.5] if mode == "heating" else [17.5, 26.0],
        "gap_range": [3.0, 8.0],
        "noise": {"amplitude": 1.0, "lengthscale": 0.2, "observation_sd": 0.0},
        "seed": 101 if mode == "heating" else 456,
    }


DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "checkpoint": None,
    "data": {
        "path": None,
        "mode": "heating",
        "n_steps": 24,
        "surrogate": {"heating": _surrogate_defaults("heating"),
                      "cooling": _surrogate_defaults("cooling")},
        "train_fraction": 0.7,
        "cutoff": None,
    },
    "model": ModelConfig().to_dict(),
    "train": TrainConfig().to_dict(),
    "eval": {"runs": 10, "bins": 50},
    "generate": {"conditions": None, "n_per_cond": 1, "n": None},
    "experiment": {
        "case": "in_dist",
        "cutoff": 20.0,
        "train_fraction": None,
        "seeds": 5,
        "modes": ["heating", "cooling"],
        "kinds": ["gpvae", "pivae", "pigpvae"],
        "ood_t0_range": [15.0, 20.0],
        "ood_fraction": 0.5,
        "probe_t0": 17.0,
    },
}

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}


def _obj(props: dict, **extra) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, **extra}


_SURROGATE = _obj({
    "n": {"type": "integer", "minimum": 1},
    "k_mean": {"type": "number", "exclusiveMinimum": 0},
    "k_sd": {"type": "number", "minimum": 0},
    "t0_range": _PAIR,
    "gap_range": _PAIR,
    "noise": _obj({"amplitude": {"type": "number", "minimum": 0},
                   "lengthscale": {"type": "number", "exclusiveMinimum": 0},
                   "observation_sd": {"type": "number", "minimum": 0}}),
    "seed": _INT,
})

SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "output_dir": {"type": "string"},
    "checkpoint": {"type": ["string", "null"]},
    "data": _obj({
        "path": {"type": ["string", "null"]},
        "mode": {"enum": ["heating", "cooling"]},
        "n_steps": {"type": "integer", "minimum": 2},
        "surrogate": _obj({"heating": _SURROGATE, "cooling": _SURROGATE}),
        "train_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "cutoff": {"type": ["number", "null"]},
    }),
    "model": _obj({f.name: {} for f in fields(ModelConfig)}),
    "train": _obj({f.name: {} for f in fields(TrainConfig)}),
    "eval": _obj({"runs": {"type": "integer", "minimum": 1},
                  "bins": {"type": "integer", "minimum": 1}}),
    "generate": _obj({
        "conditions": {"type": ["array", "null"], "items": _PAIR},
        "n_per_cond": {"type": "integer", "minimum": 1},
        "n": {"type": ["integer", "null"], "minimum": 1},
    }),
    "experiment": _obj({
        "case": {"enum": ["in_dist", "out_dist"]},
        "cutoff": _NUM,
        "train_fraction": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
        "seeds": {"type": "integer", "minimum": 1},
        "modes": {"type": "array", "items": {"enum": ["heating", "cooling"]}, "minItems": 1},
        "kinds": {"type": "array", "items": {"enum": list(KINDS)}, "minItems": 1},
        "ood_t0_range": _PAIR,
        "ood_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "probe_t0": _NUM,
    }),
})


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(user: dict | None = None) -> dict:
    """Validate ``user`` and merge it over :data:`DEFAULTS`."""
    user = user or {}
    try:
        jsonschema.validate(user, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    cfg = deep_merge(DEFAULTS, user)
    try:
        ModelConfig.from_dict(cfg["model"])
        TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load(path) -> dict:
    try:
        user = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve(user)
