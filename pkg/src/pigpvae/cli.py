"""Command line interface: ``pigpvae {synth,train,generate,evaluate,experiment}``.

Every command reads one JSON run config, writes its outputs under
``output_dir`` together with the resolved config and a manifest of output
files and their SHA-256 digests.  Failures print a single line
``pigpvae: error[<category>]: <message>`` and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .checkpoint import dumps as checkpoint_dumps, load_checkpoint
from .data import (
    DataFormatError,
    DataShapeError,
    EmptyTrainError,
    SeriesBatch,
    SplitSpec,
    fit_normalizer,
    load_csv,
    split,
    synthesize_surrogate,
    write_csv,
)
from .gp import NumericalError
from .metrics import (
    compare,
    density_table,
    evaluate,
    pca_project,
)
from .models import (
    PHYSICS_KINDS,
    ModelConfig,
    UsageError,
    generate,
    generate_like,
    reconstruct,
    sample_conditions,
)
from .training import TRACE_COLUMNS, TrainConfig, TrainingError, train

log = logging.getLogger("pigpvae")

ERROR_CATEGORIES = (
    (cfgmod.ConfigError, "config", 2),
    (EmptyTrainError, "empty_train", 3),
    (DataFormatError, "data_format", 3),
    (DataShapeError, "data_shape", 3),
    (NumericalError, "numerical", 4),
    (TrainingError, "training", 4),
    (UsageError, "usage", 5),
    (FileNotFoundError, "io", 6),
)


# ---------------------------------------------------------------------------
# output helpers


class Outputs:
    """Tracks files written under one output directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def write_text(self, rel: str, text: str) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
        if rel not in self.files:
            self.files.append(rel)
        return path

    def write_json(self, rel: str, doc) -> Path:
        return self.write_text(rel, json.dumps(doc, sort_keys=True, indent=2) + "\n")

    def write_rows(self, rel: str, header, rows) -> Path:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return self.write_text(rel, buf.getvalue())

    def write_batches(self, rel: str, batches) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_csv(path, batches)
        if rel not in self.files:
            self.files.append(rel)
        return path

    def manifest(self, command: str) -> Path:
        entries = {}
        for rel in sorted(self.files):
            digest = hashlib.sha256((self.root / rel).read_bytes()).hexdigest()
            entries[rel] = digest
        return self.write_json("run_manifest.json", {"command": command, "files": entries})


def _fmt(x: float) -> str:
    return repr(float(x))


def _curve_rows(batch: SeriesBatch):
    for sid, curve, ts in zip(batch.ids, batch.values, batch.ts):
        for i, v in enumerate(curve):
            yield [sid, i, _fmt(v), _fmt(ts)]


# ---------------------------------------------------------------------------
# data access


def surrogate_batches(cfg: dict) -> dict[str, SeriesBatch]:
    T = cfg["data"]["n_steps"]
    out = {}
    for mode, s in cfg["data"]["surrogate"].items():
        out[mode] = synthesize_surrogate(
            s["n"], T, mode, k_mean=s["k_mean"], k_sd=s["k_sd"], noise_cfg=s["noise"],
            seed=s["seed"], t0_range=tuple(s["t0_range"]), gap_range=tuple(s["gap_range"]),
        )
    return out


def load_batches(cfg: dict) -> dict[str, SeriesBatch]:
    path = cfg["data"]["path"]
    return load_csv(path) if path else surrogate_batches(cfg)


def _mode_batch(cfg: dict, mode: str | None = None) -> SeriesBatch:
    mode = mode or cfg["data"]["mode"]
    batches = load_batches(cfg)
    if mode not in batches:
        raise DataShapeError(f"dataset has no {mode} curves")
    return batches[mode]


def _checkpoint_path(cfg: dict) -> Path:
    return Path(cfg["checkpoint"] or Path(cfg["output_dir"]) / "checkpoint.json")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, out: Outputs) -> None:
    batches = surrogate_batches(cfg)
    out.write_batches("dataset.csv", [batches[m] for m in ("heating", "cooling") if m in batches])


def _train_on(cfg: dict, batch: SeriesBatch, seed: int, model_overrides=None):
    model_cfg = ModelConfig.from_dict({**cfg["model"], **(model_overrides or {})})
    train_cfg = TrainConfig.from_dict({**cfg["train"], "seed": seed})
    return train(model_cfg, batch, train_cfg, fit_normalizer(batch))


def cmd_train(cfg: dict, out: Outputs) -> None:
    full = _mode_batch(cfg)
    spec = SplitSpec(cfg["data"]["train_fraction"], cfg["seed"], cfg["data"]["cutoff"])
    train_batch, _ = split(full, spec)
    trace = _train_on(cfg, train_batch, cfg["seed"])
    out.write_text("checkpoint.json", checkpoint_dumps(trace.state) + "\n")
    out.write_rows("trace.csv", TRACE_COLUMNS,
                   ([r[0]] + [_fmt(v) for v in r[1:]] for r in trace.rows()))
    log.info("trained %s in %.1fs", trace.state.kind, trace.seconds)


def _generate_with_warnings(fn, *args, **kwargs):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        batch = fn(*args, **kwargs)
    return batch, sorted({str(w.message) for w in caught})


def cmd_generate(cfg: dict, out: Outputs) -> None:
    state = load_checkpoint(_checkpoint_path(cfg))
    g = cfg["generate"]
    if g["conditions"] is not None:
        batch, warns = _generate_with_warnings(
            generate, state, g["conditions"], g["n_per_cond"], cfg["seed"]
        )
    else:
        n = g["n"] or max(len(state.conditions), 1)
        batch, warns = _generate_with_warnings(generate_like, state, n, cfg["seed"])
    out.write_batches("generated.csv", [batch])
    out.write_json("generate_report.json", {
        "model_kind": state.kind,
        "n_generated": len(batch),
        "conditioned": state.kind in PHYSICS_KINDS,
        "seed": cfg["seed"],
        "warnings": warns,
    })


def _figure_exports(out: Outputs, prefix: str, real, gen, bins: int, state=None):
    out.write_rows(f"{prefix}generated.csv", ["series_id", "t_index", "temperature",
                                               "system_temperature"], _curve_rows(gen))
    try:
        proj = pca_project(real.values, gen.values, dims=2)
        out.write_rows(f"{prefix}pca.csv", ["set_label", "component_1", "component_2"],
                       ([r[0], _fmt(r[1]), _fmt(r[2])] for r in proj.rows()))
    except ValueError as exc:
        log.warning("PCA export skipped: %s", exc)
    out.write_rows(f"{prefix}density.csv", ["timestep", "bin_center", "density", "set_label"],
                   ([t, _fmt(c), _fmt(d), lab] for t, c, d, lab in
                    density_table(real.values, gen.values, bins)))
    if state is not None and state.kind == "pigpvae":
        x_hat, x_phy = reconstruct(state, real)
        rows = []
        for sid, obs, full, phy in zip(real.ids, real.values, x_hat, x_phy):
            for i in range(len(obs)):
                rows.append([sid, i, _fmt(obs[i]), _fmt(full[i]), _fmt(phy[i]),
                             _fmt(full[i] - phy[i])])
        out.write_rows(f"{prefix}reconstruction.csv",
                       ["series_id", "t_index", "observed", "full", "physical", "discrepancy"],
                       rows)


def cmd_evaluate(cfg: dict, out: Outputs) -> None:
    state = load_checkpoint(_checkpoint_path(cfg))
    real = _mode_batch(cfg, state.mode)
    bins = cfg["eval"]["bins"]
    report = evaluate(state, real, runs=cfg["eval"]["runs"], seed=cfg["seed"], bins=bins)
    doc = report.to_dict()
    doc["model_kind"] = state.kind
    out.write_json("report.json", doc)
    gen = generate_like(state, len(real), np.random.SeedSequence([cfg["seed"], 0]))
    _figure_exports(out, "", real, gen, bins, state)


# ---------------------------------------------------------------------------
# experiment


def ood_conditions(state, n: int, rng, t0_range, fraction: float) -> np.ndarray:
    """Mix resampled training conditions with t0 drawn from ``t0_range``.

    Out-of-range curves keep a resampled training gap ``ts - t0``.
    """
    cond = sample_conditions(state, n, rng)
    n_ood = int(round(fraction * n))
    if n_ood:
        idx = rng.integers(len(state.conditions), size=n_ood)
        gaps = state.conditions[idx, 1] - state.conditions[idx, 0]
        t0 = rng.uniform(t0_range[0], t0_range[1], size=n_ood)
        cond[:n_ood] = np.column_stack([t0, t0 + gaps])
    return cond


def _ood_generator(t0_range, fraction):
    def gen(state, n, seed):
        if state.kind not in PHYSICS_KINDS:
            return generate_like(state, n, seed)
        rng = np.random.default_rng(seed)
        cond = ood_conditions(state, n, rng, t0_range, fraction)
        return generate(state, cond, 1, rng)
    return gen


def run_cell(cfg: dict, mode: str, kind: str, seed: int) -> dict:
    """Train, generate and score one (mode, model, seed) experiment cell."""
    torch.set_num_threads(1)
    exp = cfg["experiment"]
    out = Outputs(cfg["output_dir"])
    prefix = f"cells/{mode}/{kind}/seed{seed}/"
    full = _mode_batch(cfg, mode)
    out_dist = exp["case"] == "out_dist"
    fraction = exp["train_fraction"] or (1.0 if out_dist else 0.7)
    spec = SplitSpec(fraction, seed, exp["cutoff"] if out_dist else None)
    train_batch, _ = split(full, spec)
    trace = _train_on(cfg, train_batch, seed, {"kind": kind})
    state = trace.state
    bins = cfg["eval"]["bins"]
    generator = _ood_generator(exp["ood_t0_range"], exp["ood_fraction"]) if out_dist else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = evaluate(state, full, runs=cfg["eval"]["runs"], seed=seed, bins=bins,
                          generator=generator)
        gen = (generator or generate_like)(state, len(full), np.random.SeedSequence([seed, 0]))
    _figure_exports(out, prefix, full, gen, bins, state)
    out.write_text(prefix + "checkpoint.json", checkpoint_dumps(state) + "\n")
    cell = {
        "mode": mode, "model": kind, "seed": seed, "status": "ok",
        "n_train": len(train_batch), "min_train_t0": float(train_batch.t0.min()),
        "report": report.to_dict(),
    }
    if out_dist:
        probe = exp["probe_t0"]
        if kind in PHYSICS_KINDS:
            gaps = state.conditions[:, 1] - state.conditions[:, 0]
            cond = [[probe, probe + float(np.median(gaps))]]
            probe_batch = generate(state, cond, 20, seed)
            out.write_rows(prefix + "probe.csv", ["series_id", "t_index", "temperature",
                                                  "system_temperature"], _curve_rows(probe_batch))
            cell["probe"] = {"t0": probe, "can_condition": True,
                             "start_min": float(probe_batch.t0.min()),
                             "start_max": float(probe_batch.t0.max())}
        else:
            cell["probe"] = {"t0": probe, "can_condition": False,
                             "fraction_below_cutoff": float(np.mean(gen.t0 < exp["cutoff"]))}
    out.write_json(prefix + "cell.json", cell)
    return cell


def _cell_or_error(args):
    cfg, mode, kind, seed = args
    try:
        return run_cell(cfg, mode, kind, seed)
    except Exception as exc:  # noqa: BLE001 - one failed cell must not void the run
        cell = {"mode": mode, "model": kind, "seed": seed, "status": "error",
                "error": f"{type(exc).__name__}: {exc}"}
        Outputs(cfg["output_dir"]).write_json(f"cells/{mode}/{kind}/seed{seed}/cell.json", cell)
        return cell


def _cell_files(root: Path, cells) -> list[str]:
    files = []
    for c in cells:
        d = root / "cells" / c["mode"] / c["model"] / f"seed{c['seed']}"
        files.extend(str(p.relative_to(root)) for p in sorted(d.glob("*")) if p.is_file())
    return files


def experiment_table(cells: list) -> dict:
    """``{mode: {model: {metric: {mean, sd}, seeds}}}`` over successful cells."""
    grouped = {}
    for c in cells:
        if c["status"] == "ok":
            grouped.setdefault(c["mode"], {}).setdefault(c["model"], []).append(c["report"])
    table = {}
    for mode, models in grouped.items():
        table[mode] = {}
        for model, reports in models.items():
            entry = {"seeds": len(reports)}
            for metric, key in (("MMD", "mmd2"), ("CD", "cd"), ("MDD", "mdd")):
                vals = np.array([r[key] for r in reports])
                sd = float(vals.std(ddof=1)) if len(vals) > 1 else None
                entry[metric] = {"mean": float(vals.mean()), "sd": sd}
            table[mode][model] = entry
    return table


def cmd_experiment(cfg: dict, out: Outputs, workers: int = 1) -> dict:
    exp = cfg["experiment"]
    full_batches = load_batches(cfg)
    if exp["case"] == "out_dist":
        for mode in exp["modes"]:
            if not np.any(full_batches[mode].t0 >= exp["cutoff"]):
                raise EmptyTrainError(
                    f"cutoff {exp['cutoff']} removes every {mode} curve"
                )
    tasks = [(cfg, mode, kind, seed) for mode in exp["modes"] for kind in exp["kinds"]
             for seed in range(exp["seeds"])]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_cell_or_error, tasks))
    else:
        cells = [_cell_or_error(t) for t in tasks]
    out.files.extend(_cell_files(out.root, cells))
    table = experiment_table(cells)
    doc = {"case": exp["case"], "table": table,
           "failed_cells": [c for c in cells if c["status"] != "ok"]}
    if exp["case"] == "out_dist":
        doc["probe"] = [dict(c["probe"], mode=c["mode"], model=c["model"], seed=c["seed"])
                        for c in cells if c["status"] == "ok"]
    out.write_json("experiment.json", doc)
    rows = []
    for mode, models in table.items():
        for model, metrics in models.items():
            cells_fmt = []
            for name in ("MMD", "CD", "MDD"):
                m = metrics[name]
                sd = f" ({m['sd']:.4f})" if m["sd"] is not None else ""
                cells_fmt.append(f"{m['mean']:.4f}{sd}")
            rows.append([mode, model, *cells_fmt])
    out.write_rows("experiment_table.csv", ["mode", "model", "MMD", "CD", "MDD"], rows)
    return doc


# ---------------------------------------------------------------------------
# entry point

COMMANDS = ("synth", "train", "generate", "evaluate", "experiment")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pigpvae", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run config (defaults used when omitted)")
    parser.add_argument("--output-dir", help="overrides output_dir from the config")
    parser.add_argument("--seed", type=int, help="overrides seed from the config")
    parser.add_argument("--workers", type=int, default=1, help="parallel experiment cells")
    parser.add_argument("--case", choices=("in_dist", "out_dist"),
                        help="experiment case (overrides experiment.case)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        user = {}
        if args.config:
            try:
                user = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise cfgmod.ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if args.output_dir:
            user["output_dir"] = args.output_dir
        if args.seed is not None:
            user["seed"] = args.seed
        if args.case:
            user.setdefault("experiment", {})["case"] = args.case
        cfg = cfgmod.resolve(user)
        out = Outputs(cfg["output_dir"])
        out.write_json("config.resolved.json", cfg)
        if args.command == "experiment":
            cmd_experiment(cfg, out, workers=max(1, args.workers))
        else:
            globals()[f"cmd_{args.command}"](cfg, out)
        out.manifest(args.command)
    except Exception as exc:  # noqa: BLE001
        for cls, category, code in ERROR_CATEGORIES:
            if isinstance(exc, cls):
                break
        else:
            category, code = "internal", 1
        message = " ".join(str(exc).split())
        print(f"pigpvae: error[{category}]: {message}", file=sys.stderr)
        return code
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
