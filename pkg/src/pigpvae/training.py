"""Full-batch Adam training shared by all model kinds, and a finite-difference
gradient checker."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np
import torch

from .data import Normalizer, SeriesBatch, fit_normalizer
from .models import (
    GenerativeModel,
    LossBreakdown,
    ModelConfig,
    build_model,
    draw_noise,
    loss_breakdown,
    prepare,
)

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "total", "recon", "kl_phys", "gp_entropy_term", "log_z", "reg")


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, term: str):
        super().__init__(f"non-finite {term} at epoch {epoch}")
        self.epoch = epoch
        self.term = term


@dataclass
class TrainConfig:
    epochs: int = 3000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    clip_norm: float = 10.0
    log_every: int = 500

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam decay rates must lie in (0, 1)")
        if self.lr < 0 or not self.eps > 0:
            raise ValueError("lr must be >= 0 and eps > 0")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainTrace:
    history: list  # one dict of LossBreakdown floats per epoch
    state: GenerativeModel
    seconds: float
    grad_norms: list = field(default_factory=list)

    def rows(self):
        for epoch, h in enumerate(self.history):
            yield [epoch] + [h[c] for c in TRACE_COLUMNS[1:]]


def _first_bad_term(lb: LossBreakdown) -> str | None:
    # components before the total, which inherits any bad component
    for name in TRACE_COLUMNS[2:] + ("total",):
        if not torch.isfinite(getattr(lb, name)):
            return name
    return None


def train(model_config: ModelConfig, batch: SeriesBatch, config: TrainConfig,
          normalizer: Normalizer | None = None) -> TrainTrace:
    """Maximize the kind's objective over the full batch with Adam.

    The optimizer minimizes ``-total / n_series``; the per-curve scaling only
    keeps gradient norms comparable across batch sizes for clipping.
    Epoch ``e`` draws its reparameterization noise from
    ``default_rng([seed, e])``.
    """
    started = time.perf_counter()
    normalizer = normalizer or fit_normalizer(batch)
    state = build_model(model_config, batch, normalizer, seed=config.seed)
    params = [p for p in state.parameters() if p.requires_grad]
    opt = torch.optim.Adam(
        params, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps
    )
    data = prepare(state, batch)
    n = len(batch)
    history, norms = [], []
    for epoch in range(config.epochs):
        noise = draw_noise(state, n, np.random.default_rng([config.seed, epoch]))
        opt.zero_grad()
        lb = loss_breakdown(state, data, noise)
        bad = _first_bad_term(lb)
        if bad:
            raise TrainingError(epoch, bad)
        (-lb.total / n).backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
        if not torch.isfinite(grad_norm):
            raise TrainingError(epoch, "gradient")
        opt.step()
        history.append(lb.as_floats())
        norms.append(float(grad_norm))
        if config.log_every and epoch % config.log_every == 0:
            log.info("%s epoch %d total %.4f", state.kind, epoch, history[-1]["total"])
    state.trained = True
    return TrainTrace(history, state, time.perf_counter() - started, norms)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple  # (parameter name, flat index)
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
               h: float = 1e-5, tolerance: float = 1e-4, atol: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients of ``fn()`` with central differences.

    Per element the error is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, atol)``;
    ``atol`` keeps gradients that are zero up to roundoff from dominating.
    ``fn`` must be deterministic (fix its noise outside).
    """
    params = dict(params)
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise TypeError(f"{name}: gradient checks need float64 parameters")
        p.grad = None
    value = fn()
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    worst, worst_err, count = ("", -1), 0.0, 0
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                fd = (up - down) / (2.0 * h)
                ad = gflat[i].item()
                err = abs(ad - fd) / max(abs(ad), abs(fd), atol)
                count += 1
                if err > worst_err or not math.isfinite(err):
                    worst, worst_err = (name, i), err
    return GradCheckReport(worst_err, worst, count, tolerance)
