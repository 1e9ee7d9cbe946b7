"""Two-sample metrics between real and generated curve sets.

All functions take ``(n, T)`` arrays of curves (degrees C) and are pure
numpy.  The readings of CD and MDD used here are recorded in
:data:`METRIC_NOTES` and copied into every report.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .models import generate_like

log = logging.getLogger(__name__)

BANDWIDTH_FLOOR = 1e-6

METRIC_NOTES = {
    "mmd": "unbiased MMD^2, Gaussian kernel, median-heuristic bandwidth on pooled set, "
           "cross term normalized by 1/(n m)",
    "cd": "sum over timestep pairs of |corr_real - corr_gen| (Pearson, across samples)",
    "mdd": "mean over timesteps and bins of |p - q|, shared equal-width bins over pooled range",
}


class MetricUsageError(ValueError):
    pass


def median_bandwidth(X, Y) -> float:
    """Median pairwise Euclidean distance of the pooled set."""
    pooled = np.vstack([np.asarray(X, float), np.asarray(Y, float)])
    sigma = float(np.median(pdist(pooled)))
    if sigma < BANDWIDTH_FLOOR:
        warnings.warn("zero median distance; MMD bandwidth floored", stacklevel=2)
        sigma = BANDWIDTH_FLOOR
    return sigma


def mmd2_unbiased(X, Y, sigma: float | None = None) -> float:
    """Unbiased squared MMD with kernel ``exp(-|x - y|^2 / (2 sigma^2))``.

    Within-set sums exclude the diagonal; the cross term averages over all
    ``n * m`` pairs.  May be negative.  ``sigma=None`` uses the median
    heuristic.
    """
    return mmd2_with_bandwidth(X, Y, sigma)[0]


def mmd2_with_bandwidth(X, Y, sigma=None):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n, m = len(X), len(Y)
    if n < 2 or m < 2:
        raise MetricUsageError("MMD needs at least two curves per set")
    if sigma is None:
        sigma = median_bandwidth(X, Y)
    gamma = 1.0 / (2.0 * sigma**2)
    kxx = np.exp(-gamma * cdist(X, X, "sqeuclidean"))
    kyy = np.exp(-gamma * cdist(Y, Y, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(X, Y, "sqeuclidean"))
    xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(xx + yy - 2.0 * kxy.mean()), float(sigma)


def _timestep_correlation(X):
    """Pearson correlation across samples; NaN rows/cols for constant timesteps."""
    Xc = X - X.mean(axis=0)
    norms = np.sqrt((Xc**2).sum(axis=0))
    const = norms == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (Xc.T @ Xc) / np.outer(norms, norms)
    corr[const, :] = np.nan
    corr[:, const] = np.nan
    return np.clip(corr, -1.0, 1.0)


def correlation_difference(X, Y, return_skipped: bool = False):
    """``sum_{i,j} |rho_ij(X) - rho_ij(Y)|`` over timestep pairs.

    Pairs involving a timestep that is constant in either set are skipped;
    with ``return_skipped`` the number of skipped (ordered) pairs is also
    returned.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) < 3 or len(Y) < 3:
        raise MetricUsageError("CD needs at least three curves per set")
    if X.shape[1] != Y.shape[1]:
        raise MetricUsageError("curve lengths differ")
    diff = np.abs(_timestep_correlation(X) - _timestep_correlation(Y))
    skipped = int(np.isnan(diff).sum())
    cd = float(np.nansum(diff))
    return (cd, skipped) if return_skipped else cd


def marginal_distribution_difference(X, Y, bins: int = 50) -> float:
    """Mean over timesteps of the mean absolute difference of normalized histograms.

    Both sets share, per timestep, ``bins`` equal-width bins spanning the
    pooled min..max.  A timestep with a degenerate pooled range contributes 0.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) < 1 or len(Y) < 1:
        raise MetricUsageError("MDD needs non-empty sets")
    if X.shape[1] != Y.shape[1]:
        raise MetricUsageError("curve lengths differ")
    per_step = np.zeros(X.shape[1])
    for t in range(X.shape[1]):
        lo = min(X[:, t].min(), Y[:, t].min())
        hi = max(X[:, t].max(), Y[:, t].max())
        if hi <= lo:
            warnings.warn(f"degenerate range at timestep {t}; MDD term set to 0", stacklevel=2)
            continue
        edges = np.linspace(lo, hi, bins + 1)
        p = np.histogram(X[:, t], edges)[0] / len(X)
        q = np.histogram(Y[:, t], edges)[0] / len(Y)
        per_step[t] = np.abs(p - q).mean()
    return float(per_step.mean())


def density_table(X, Y, bins: int = 50, labels=("real", "generated")):
    """Per-timestep normalized histograms on shared edges (for density plots).

    Returns rows ``(timestep, bin_center, density, set_label)``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    rows = []
    for t in range(X.shape[1]):
        lo = min(X[:, t].min(), Y[:, t].min())
        hi = max(X[:, t].max(), Y[:, t].max())
        if hi <= lo:
            hi = lo + 1e-9
        edges = np.linspace(lo, hi, bins + 1)
        centers = 0.5 * (edges[:-1] + edges[1:])
        for label, data in zip(labels, (X, Y)):
            counts = np.histogram(data[:, t], edges)[0] / len(data)
            rows.extend((t, float(c), float(d), label) for c, d in zip(centers, counts))
    return rows


@dataclass
class PcaProjection:
    components: np.ndarray  # (dims, T)
    explained_variance: np.ndarray  # (dims,)
    explained_ratio: np.ndarray
    real: np.ndarray  # (n, dims)
    generated: np.ndarray  # (m, dims)
    mean: np.ndarray

    def rows(self, labels=("real", "generated")):
        out = []
        for label, proj in zip(labels, (self.real, self.generated)):
            out.extend((label, *map(float, row)) for row in proj)
        return out


def pca_project(X_real, X_gen, dims: int = 2) -> PcaProjection:
    """PCA fitted on the pooled, mean-centered curves; both sets projected.

    Each component's sign is fixed so its largest-magnitude loading is
    positive.
    """
    X_real = np.asarray(X_real, dtype=np.float64)
    X_gen = np.asarray(X_gen, dtype=np.float64)
    pooled = np.vstack([X_real, X_gen])
    if len(pooled) < dims:
        raise MetricUsageError(f"need at least {dims} pooled rows")
    mean = pooled.mean(axis=0)
    centered = pooled - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > s.max() * max(centered.shape) * np.finfo(float).eps)) if s.size else 0
    if rank < dims:
        raise MetricUsageError(f"pooled data has rank {rank} < {dims} requested components")
    comps = vt[:dims]
    signs = np.sign(comps[np.arange(dims), np.argmax(np.abs(comps), axis=1)])
    comps = comps * signs[:, None]
    var = s**2 / (len(pooled) - 1)
    return PcaProjection(
        components=comps,
        explained_variance=var[:dims],
        explained_ratio=var[:dims] / var.sum(),
        real=(X_real - mean) @ comps.T,
        generated=(X_gen - mean) @ comps.T,
        mean=mean,
    )


@dataclass
class EvalReport:
    mmd2: float
    mmd_bandwidth: float
    cd: float
    mdd: float
    bin_count: int
    runs: int
    seed: int
    per_run: list = field(default_factory=list)
    sd: dict | None = None
    cd_skipped_pairs: int = 0
    notes: dict = field(default_factory=lambda: dict(METRIC_NOTES))
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "mmd2": self.mmd2,
            "mmd_bandwidth": self.mmd_bandwidth,
            "cd": self.cd,
            "mdd": self.mdd,
            "bin_count": self.bin_count,
            "runs": self.runs,
            "seed": self.seed,
            "per_run": self.per_run,
            "cd_skipped_pairs": self.cd_skipped_pairs,
            "notes": self.notes,
            "warnings": self.warnings,
        }
        if self.sd is not None:
            d["sd"] = self.sd
        return d


def compare(real, generated, bins: int = 50) -> dict:
    """All three metrics for one generated set."""
    mmd2, sigma = mmd2_with_bandwidth(real, generated)
    cd, skipped = correlation_difference(real, generated, return_skipped=True)
    return {
        "mmd2": mmd2,
        "mmd_bandwidth": sigma,
        "cd": cd,
        "mdd": marginal_distribution_difference(real, generated, bins),
        "cd_skipped_pairs": skipped,
    }


def summarize(per_run: list, bins: int, seed: int, warn: list | None = None) -> EvalReport:
    keys = ("mmd2", "cd", "mdd")
    means = {k: float(np.mean([r[k] for r in per_run])) for k in keys}
    sd = None
    if len(per_run) > 1:
        sd = {k: float(np.std([r[k] for r in per_run], ddof=1)) for k in keys}
    return EvalReport(
        mmd2=means["mmd2"],
        mmd_bandwidth=float(np.mean([r["mmd_bandwidth"] for r in per_run])),
        cd=means["cd"],
        mdd=means["mdd"],
        bin_count=bins,
        runs=len(per_run),
        seed=seed,
        per_run=per_run,
        sd=sd,
        cd_skipped_pairs=int(sum(r["cd_skipped_pairs"] for r in per_run)),
        warnings=list(warn or []),
    )


def evaluate(state, real, runs: int = 10, seed: int = 0, bins: int = 50,
             generator=None) -> EvalReport:
    """Generate ``len(real)`` curves per run and score them against ``real``.

    ``generator(state, n, seed)`` defaults to in-distribution generation;
    run ``r`` uses seed ``[seed, r]``.
    """
    generator = generator or generate_like
    per_run = []
    for r in range(runs):
        gen = generator(state, len(real), np.random.SeedSequence([seed, r]))
        per_run.append(compare(real.values, gen.values, bins))
    return summarize(per_run, bins, seed)
