"""Heating/cooling curve datasets: CSV loading, surrogate synthesis, splits
and normalization.

Curves are stored in degrees Celsius on a time grid normalized to [0, 1].
The conditioning variables of a curve are its time grid, its initial
temperature ``t0`` (always the first sample) and its surrounding
temperature ``ts`` (a per-curve scalar).
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MODES = ("heating", "cooling")
CSV_COLUMNS = ("series_id", "t_index", "temperature", "system_temperature")

SCALE_FLOOR = 1e-8


class DataFormatError(ValueError):
    """Raised for CSV files with missing columns or unparsable cells."""


class DataShapeError(ValueError):
    """Raised when curves are ragged or have gaps in their time index."""


class EmptyTrainError(ValueError):
    """Raised when a split leaves no training curves."""


@dataclass(frozen=True)
class SeriesBatch:
    """Fixed-length univariate temperature curves plus their conditioning.

    Attributes:
        values: (n_series, T) temperatures in degrees Celsius.
        time_grid: (T,) strictly increasing times in [0, 1].
        ts: (n_series,) surrounding temperature per curve.
        mode: ``"heating"`` or ``"cooling"``.
        ids: optional series identifiers, carried through splits.
        validate: check the heating/cooling ordering of ``ts`` against
            ``t0``; generated curves from unconditional models skip it.
    """

    values: np.ndarray
    time_grid: np.ndarray
    ts: np.ndarray
    mode: str
    ids: tuple = field(default=())
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        grid = np.asarray(self.time_grid, dtype=np.float64)
        ts = np.asarray(self.ts, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "time_grid", grid)
        object.__setattr__(self, "ts", ts)
        if not self.ids:
            object.__setattr__(self, "ids", tuple(str(i) for i in range(len(values))))
        else:
            object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if values.shape[1] != grid.shape[0]:
            raise DataShapeError(
                f"curves have {values.shape[1]} steps but the grid has {grid.shape[0]}"
            )
        if ts.shape[0] != values.shape[0] or len(self.ids) != values.shape[0]:
            raise DataShapeError("ts / ids length does not match number of curves")
        if grid.size > 1 and np.any(np.diff(grid) <= 0):
            raise ValueError("time grid must be strictly increasing")
        if self.validate and len(values):
            if self.mode == "heating" and np.any(ts < values[:, 0]):
                raise ValueError("heating curves need ts >= t0")
            if self.mode == "cooling" and np.any(ts > values[:, 0]):
                raise ValueError("cooling curves need ts <= t0")

    @property
    def t0(self) -> np.ndarray:
        return self.values[:, 0]

    @property
    def n_series(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.n_series

    def subset(self, index) -> "SeriesBatch":
        index = np.asarray(index, dtype=np.int64)
        return SeriesBatch(
            values=self.values[index],
            time_grid=self.time_grid,
            ts=self.ts[index],
            mode=self.mode,
            ids=tuple(self.ids[i] for i in index),
            validate=self.validate,
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.values.tobytes())
        h.update(self.ts.tobytes())
        h.update(self.mode.encode())
        return h.hexdigest()[:16]


def infer_mode(t0: float, ts: float) -> str:
    if ts > t0:
        return "heating"
    if ts < t0:
        return "cooling"
    raise ValueError(f"cannot infer mode: t0 == ts == {t0}")


def load_csv(path) -> dict[str, SeriesBatch]:
    """Read a long-format CSV into one batch per mode present in the file.

    Every series must cover ``t_index`` 0..T-1 exactly once with the same T.
    The surrounding temperature of a curve is the mean of its
    ``system_temperature`` column; its mode follows from the sign of
    ``ts - t0``.
    """
    path = Path(path)
    rows: dict[str, dict[int, tuple[float, float]]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataFormatError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                t_index = int(row["t_index"])
                temp = float(row["temperature"])
                system = float(row["system_temperature"])
            except (TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}: row {lineno}: {exc}") from None
            if not (math.isfinite(temp) and math.isfinite(system)):
                raise DataFormatError(f"{path}: row {lineno}: non-finite value")
            series = rows.setdefault(row["series_id"], {})
            if t_index in series:
                raise DataShapeError(
                    f"series {row['series_id']!r}: duplicate t_index {t_index}"
                )
            series[t_index] = (temp, system)

    if not rows:
        raise DataShapeError(f"{path}: no data rows")

    n_steps = None
    curves = {mode: ([], [], []) for mode in MODES}
    for sid, series in rows.items():
        if sorted(series) != list(range(len(series))):
            raise DataShapeError(f"series {sid!r}: t_index is not a complete 0..T-1 range")
        if n_steps is None:
            n_steps = len(series)
        elif len(series) != n_steps:
            raise DataShapeError(
                f"series {sid!r} has {len(series)} steps, expected {n_steps}"
            )
        values = np.array([series[i][0] for i in range(n_steps)])
        ts = float(np.mean([series[i][1] for i in range(n_steps)]))
        mode = infer_mode(values[0], ts)
        curves[mode][0].append(sid)
        curves[mode][1].append(values)
        curves[mode][2].append(ts)

    if n_steps < 2:
        raise DataShapeError("curves need at least two time steps")
    grid = np.arange(n_steps) / (n_steps - 1)
    return {
        mode: SeriesBatch(np.array(v), grid, np.array(ts), mode, ids=tuple(ids))
        for mode, (ids, v, ts) in curves.items()
        if ids
    }


def write_csv(path, batches: Sequence[SeriesBatch], prefix: str = "") -> None:
    """Write batches in the long CSV format read by :func:`load_csv`."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for batch in batches:
            for sid, curve, ts in zip(batch.ids, batch.values, batch.ts):
                for i, temp in enumerate(curve):
                    writer.writerow([f"{prefix}{sid}", i, repr(float(temp)), repr(float(ts))])


def _se_kernel(grid, lengthscale, variance):
    diff = grid[:, None] - grid[None, :]
    return variance * np.exp(-0.5 * (diff / lengthscale) ** 2)


def synthesize_surrogate(
    n: int,
    T: int,
    mode: str,
    k_mean: float = 2.0,
    k_sd: float = 0.3,
    noise_cfg: dict | None = None,
    seed: int = 0,
    t0_range: tuple[float, float] | None = None,
    gap_range: tuple[float, float] = (3.0, 8.0),
) -> SeriesBatch:
    """Draw Newton heating/cooling curves with a smooth GP distortion.

    Each curve is ``(T0 - Ts) exp(-k t) + Ts`` with ``k ~ N(k_mean, k_sd^2)``
    (clipped positive), ``T0`` uniform on ``t0_range`` and ``|Ts - T0|``
    uniform on ``gap_range``.  A zero-mean GP path with squared-exponential
    kernel is added, anchored so that it vanishes at t=0; the first sample of
    every curve is therefore exactly T0.

    ``noise_cfg`` keys: ``amplitude`` (GP standard deviation, degrees C),
    ``lengthscale`` (normalized time units), ``observation_sd`` (white noise
    added after t=0).
    """
    if n < 1 or T < 2:
        raise ValueError("need n >= 1 and T >= 2")
    if not k_mean > 0:
        raise ValueError(f"k_mean must be positive, got {k_mean}")
    if k_sd < 0:
        raise ValueError(f"k_sd must be non-negative, got {k_sd}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    cfg = {"amplitude": 0.4, "lengthscale": 0.25, "observation_sd": 0.0}
    cfg.update(noise_cfg or {})
    if t0_range is None:
        t0_range = (15.0, 22.5) if mode == "heating" else (17.5, 26.0)

    rng = np.random.default_rng(seed)
    grid = np.arange(T) / (T - 1)
    k = np.clip(rng.normal(k_mean, k_sd, size=n), 1e-3, None) if k_sd > 0 else np.full(n, k_mean)
    t0 = rng.uniform(*t0_range, size=n)
    gap = rng.uniform(*gap_range, size=n)
    ts = t0 + gap if mode == "heating" else t0 - gap
    values = (t0 - ts)[:, None] * np.exp(-k[:, None] * grid[None, :]) + ts[:, None]
    values[:, 0] = t0

    amp = float(cfg["amplitude"])
    if amp > 0:
        cov = _se_kernel(grid, float(cfg["lengthscale"]), amp**2)
        chol = np.linalg.cholesky(cov + 1e-9 * np.eye(T))
        paths = rng.standard_normal((n, T)) @ chol.T
        values = values + (paths - paths[:, :1])
    obs = float(cfg["observation_sd"])
    if obs > 0:
        values[:, 1:] += rng.normal(0.0, obs, size=(n, T - 1))
    return SeriesBatch(values, grid, ts, mode, ids=tuple(f"{mode[0]}{i:03d}" for i in range(n)))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0
    ood_cutoff: float | None = None

    def __post_init__(self):
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must lie in (0, 1]")


def split(batch: SeriesBatch, spec: SplitSpec) -> tuple[SeriesBatch, SeriesBatch]:
    """Return ``(train, eval)``; eval is always the full batch.

    With ``ood_cutoff`` set, only curves with ``t0 >= cutoff`` are training
    candidates; the fraction is applied to the candidates.
    """
    if len(batch) == 0:
        raise EmptyTrainError("cannot split an empty batch")
    candidates = np.arange(len(batch))
    if spec.ood_cutoff is not None:
        candidates = candidates[batch.t0 >= spec.ood_cutoff]
        if candidates.size == 0:
            raise EmptyTrainError(
                f"cutoff {spec.ood_cutoff} removes all {len(batch)} curves"
            )
    size = max(1, math.floor(spec.train_fraction * candidates.size + 0.5))
    rng = np.random.default_rng(spec.seed)
    train_idx = rng.permutation(candidates)[:size]
    return batch.subset(train_idx), batch


@dataclass(frozen=True)
class Normalizer:
    """Affine map ``(x - shift) / scale`` fitted on a training batch."""

    shift: float
    scale: float
    fitted_on: str = ""

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, x):
        return (x - self.shift) / self.scale

    def invert(self, x):
        return x * self.scale + self.shift


def fit_normalizer(batch: SeriesBatch) -> Normalizer:
    if len(batch) == 0:
        raise ValueError("cannot fit a normalizer on an empty batch")
    shift = float(np.mean(batch.values))
    scale = float(np.std(batch.values))
    if scale < SCALE_FLOOR:
        log.warning("zero-variance batch; scale floored at %g", SCALE_FLOOR)
        scale = SCALE_FLOOR
    return Normalizer(shift, scale, batch.fingerprint())
