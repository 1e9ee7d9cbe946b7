"""JSON checkpoints with a bit-exact float round trip.

Parameter arrays are stored flattened in row-major order next to their
shapes.  Python's float ``repr`` (used by :mod:`json`) is shortest
round-trip, so every float64 survives a save/load unchanged.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .data import Normalizer
from .models import GenerativeModel, ModelConfig

FORMAT_VERSION = 1


def state_to_dict(state: GenerativeModel) -> dict:
    params = {}
    for name, p in state.named_parameters():
        t = p.detach()
        params[name] = {"shape": list(t.shape), "values": t.reshape(-1).tolist()}
    widths = {name: mod.widths for name, mod in state.named_children()}
    doc = {
        "format_version": FORMAT_VERSION,
        "model_kind": state.kind,
        "mode": state.mode,
        "seed": state.seed,
        "trained": state.trained,
        "config": state.config.to_dict(),
        "widths": widths,
        "time_grid": state.time_grid.tolist(),
        "normalizer": {
            "shift": state.normalizer.shift,
            "scale": state.normalizer.scale,
            "fitted_on": state.normalizer.fitted_on,
        },
        "conditions": state.conditions.tolist(),
        "parameters": params,
        "obs_sd": float(state.obs_sd.detach()),
    }
    if state.has_gp:
        kp = state.kernel_params
        doc["kernel"] = {
            "lengthscale": float(kp.lengthscale.detach()),
            "variance": float(kp.variance.detach()),
            "jitter": kp.jitter,
        }
    if state.kind == "pigpvae":
        doc["alpha"] = {"effective": float(state.alpha.detach()), "mode": state.config.alpha_mode}
    return doc


def state_from_dict(doc: dict) -> GenerativeModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    config = ModelConfig.from_dict(doc["config"])
    norm = doc["normalizer"]
    state = GenerativeModel(
        config,
        np.asarray(doc["time_grid"], dtype=np.float64),
        Normalizer(norm["shift"], norm["scale"], norm["fitted_on"]),
        mode=doc["mode"],
        conditions=np.asarray(doc["conditions"], dtype=np.float64).reshape(-1, 2),
        seed=doc["seed"],
    )
    own = dict(state.named_parameters())
    if set(own) != set(doc["parameters"]):
        raise ValueError("checkpoint parameters do not match the model layout")
    with torch.no_grad():
        for name, entry in doc["parameters"].items():
            values = torch.tensor(entry["values"], dtype=torch.float64).reshape(entry["shape"])
            own[name].copy_(values)
    state.trained = bool(doc["trained"])
    return state


def dumps(state: GenerativeModel) -> str:
    return json.dumps(state_to_dict(state), sort_keys=True, indent=1)


def save_checkpoint(state: GenerativeModel, path) -> None:
    Path(path).write_text(dumps(state) + "\n", encoding="utf-8")


def load_checkpoint(path) -> GenerativeModel:
    return state_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
