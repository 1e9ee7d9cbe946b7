"""The four generative models (VAE, GPVAE, PIVAE, PIGPVAE).

A model is a :class:`GenerativeModel` (an ``nn.Module`` holding every
trainable tensor) plus its data-dependent context: time grid, normalizer,
physical prior and the conditioning pairs seen in training.  Objectives are
plain functions returning a :class:`LossBreakdown` of 0-dim tensors, all to
be *maximized*.

Randomness is drawn from numpy generators in a fixed order (rate latent,
then GP latent, then VAE latent) so that models sharing a branch consume
identical noise.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import gp
from .data import Normalizer, SeriesBatch
from .nets import Mlp, decode_delta, decode_pointwise, encode_gp, encode_phys
from .physics import (
    PhysicalPrior,
    kl_gauss_gauss,
    kl_standard_normal,
    physical_decode,
    softplus_inverse,
)

log = logging.getLogger(__name__)

KINDS = ("vae", "gpvae", "pivae", "pigpvae")
GP_KINDS = ("gpvae", "pigpvae")
PHYSICS_KINDS = ("pivae", "pigpvae")
OBS_SD_FLOOR = 1e-4


class UsageError(RuntimeError):
    """Operation called on the wrong kind of model or an untrained model."""


@dataclass
class ModelConfig:
    kind: str = "pigpvae"
    latent_dim: int = 2
    hidden: list = field(default_factory=lambda: [64, 64])
    decoder_hidden: list = field(default_factory=lambda: [32, 32])
    activation: str = "tanh"
    lengthscale: float = 0.2
    kernel_variance: float = 1.0
    jitter: float = 1e-6
    train_kernel: bool = True
    prior_mean: float = softplus_inverse(2.0)
    prior_sd: float = 0.5
    obs_sd: float = 0.1
    alpha: float = 1.0
    alpha_mode: str = "fixed"
    alpha_floor: float = 0.1
    n_samples: int = 1
    condition_jitter_sd: float = 0.25
    anchor_discrepancy: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.alpha_mode not in ("fixed", "trainable"):
            raise ValueError(f"alpha_mode must be 'fixed' or 'trainable', got {self.alpha_mode!r}")
        if self.latent_dim < 0 or (self.latent_dim == 0 and self.kind != "pigpvae"):
            raise ValueError("latent_dim must be positive (0 only disables the pigpvae discrepancy)")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not self.obs_sd > OBS_SD_FLOOR:
            raise ValueError(f"obs_sd must exceed {OBS_SD_FLOOR}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def prior(self) -> PhysicalPrior:
        return PhysicalPrior(self.prior_mean, self.prior_sd)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    recon: torch.Tensor
    kl_phys: torch.Tensor
    gp_entropy_term: torch.Tensor
    log_z: torch.Tensor
    reg: torch.Tensor

    def as_floats(self) -> dict:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _zero():
    return torch.zeros((), dtype=torch.float64)


class GenerativeModel(nn.Module):
    """Parameters and context of one of the four model kinds.

    Nets are created in the fixed order physical encoder, GP encoder,
    VAE encoder, decoder, discrepancy decoder, all from one generator seeded
    with ``seed``; a PIGPVAE and a PIVAE built from the same seed share their
    physical encoder weights.
    """

    def __init__(self, config: ModelConfig, time_grid, normalizer: Normalizer,
                 mode: str = "heating", conditions=None, seed: int = 0):
        super().__init__()
        self.config = config
        self.kind = config.kind
        self.mode = mode
        self.seed = int(seed)
        self.time_grid = torch.as_tensor(np.asarray(time_grid, dtype=np.float64))
        self.normalizer = normalizer
        self.prior = config.prior
        self.conditions = (
            np.zeros((0, 2)) if conditions is None else np.asarray(conditions, dtype=np.float64)
        )
        self.trained = False

        T = self.n_steps
        L = config.latent_dim
        rng = np.random.default_rng(self.seed)
        act = config.activation
        if self.kind in PHYSICS_KINDS:
            self.phys_encoder = Mlp([T, *config.hidden, 2], act, rng)
        if self.kind in GP_KINDS and L > 0:
            self.gp_encoder = Mlp([T, *config.hidden, 2 * L * T], act, rng)
        if self.kind == "vae":
            self.encoder = Mlp([T, *config.hidden, 2 * L], act, rng)
            self.decoder = Mlp([L, *config.hidden, T], act, rng)
        if self.kind == "gpvae":
            self.decoder = Mlp([L, *config.decoder_hidden, 1], act, rng)
        if self.kind == "pigpvae" and L > 0:
            self.delta_decoder = Mlp([L + 1, *config.decoder_hidden, 1], act, rng)
            if config.anchor_discrepancy:
                # a constant output offset cancels under anchoring; keep it at zero
                self.delta_decoder.layers[-1].bias.requires_grad_(False)

        if self.has_gp:
            self.log_lengthscale = nn.Parameter(
                torch.tensor(math.log(config.lengthscale), dtype=torch.float64),
                requires_grad=config.train_kernel,
            )
            self.log_variance = nn.Parameter(
                torch.tensor(math.log(config.kernel_variance), dtype=torch.float64),
                requires_grad=config.train_kernel,
            )
        self.obs_sd_raw = nn.Parameter(
            torch.tensor(softplus_inverse(config.obs_sd - OBS_SD_FLOOR), dtype=torch.float64)
        )
        if self.kind == "pigpvae":
            alpha0 = config.alpha
            if config.alpha_mode == "trainable":
                alpha0 = max(config.alpha - config.alpha_floor, 1e-6)
            self.alpha_raw = nn.Parameter(
                torch.tensor(softplus_inverse(alpha0), dtype=torch.float64),
                requires_grad=config.alpha_mode == "trainable",
            )

    @property
    def n_steps(self) -> int:
        return int(self.time_grid.shape[0])

    @property
    def has_gp(self) -> bool:
        return self.kind in GP_KINDS and self.config.latent_dim > 0

    @property
    def kernel_params(self) -> gp.KernelParams:
        return gp.KernelParams(
            torch.exp(self.log_lengthscale), torch.exp(self.log_variance), self.config.jitter
        )

    @property
    def obs_sd(self) -> torch.Tensor:
        return OBS_SD_FLOOR + F.softplus(self.obs_sd_raw)

    @property
    def alpha(self) -> torch.Tensor:
        a = F.softplus(self.alpha_raw)
        if self.config.alpha_mode == "trainable":
            a = a + self.config.alpha_floor
        return a


# ---------------------------------------------------------------------------
# objective plumbing


def prepare(state: GenerativeModel, batch: SeriesBatch) -> dict:
    """Tensors an objective needs: normalized curves plus conditioning in degrees C."""
    if batch.n_steps != state.n_steps:
        raise ValueError(f"batch has {batch.n_steps} steps, model expects {state.n_steps}")
    return {
        "x": torch.from_numpy(state.normalizer.apply(batch.values)),
        "t0": torch.from_numpy(batch.t0.copy()),
        "ts": torch.from_numpy(batch.ts.copy()),
    }


def draw_noise(state: GenerativeModel, n: int, rng: np.random.Generator) -> dict:
    S, L, T = state.config.n_samples, state.config.latent_dim, state.n_steps
    noise = {}
    if state.kind in PHYSICS_KINDS:
        noise["phy"] = torch.from_numpy(rng.standard_normal((S, n, 1)))
    if state.has_gp:
        noise["gp"] = torch.from_numpy(rng.standard_normal((S, n, L, T)))
    if state.kind == "vae":
        noise["z"] = torch.from_numpy(rng.standard_normal((S, n, L)))
    return noise


def gaussian_log_lik(x, x_hat, sd):
    """Sum over steps and curves of log N(x; x_hat, sd^2), averaged over samples."""
    var = sd**2
    ll = -0.5 * (math.log(2.0 * math.pi) + torch.log(var) + (x - x_hat) ** 2 / var)
    return ll.sum(-1).mean(0).sum()


def _gp_branch(state, x, eps):
    pseudo = encode_gp(state.gp_encoder, x, state.config.latent_dim)
    params = state.kernel_params
    post, log_z = gp.posterior_and_log_marginal(state.time_grid, pseudo, params)
    entropy = gp.expected_log_pseudo_likelihood(pseudo, post)
    z = gp.sample_posterior_with(post, eps, params.jitter)
    return z, entropy, log_z


def _physical_branch(state, data, eps):
    q = encode_phys(state.phys_encoder, data["x"])
    z_phy = q.sample_with(eps)
    x_phy = physical_decode(z_phy, state.time_grid, data["t0"], data["ts"], state.normalizer)
    return x_phy, kl_gauss_gauss(q, state.prior)


def _check_kind(state, kind):
    if state.kind != kind:
        raise UsageError(f"{kind} objective called on a {state.kind} model")


def _vae(state, data, noise):
    x = data["x"]
    L = state.config.latent_dim
    out = state.encoder(x)
    mean = out[..., :L]
    sd = F.softplus(out[..., L:]) + 1e-6
    z = mean + sd * noise["z"]
    recon = gaussian_log_lik(x, state.decoder(z), state.obs_sd)
    kl = kl_standard_normal(mean, sd)
    zero = _zero()
    # the VAE's Gaussian-prior KL is reported in the kl_phys slot
    return LossBreakdown(recon - kl, recon, kl, zero, zero, zero)


def _gpvae(state, data, noise):
    x = data["x"]
    z, entropy, log_z = _gp_branch(state, x, noise["gp"])
    recon = gaussian_log_lik(x, decode_pointwise(state.decoder, z), state.obs_sd)
    zero = _zero()
    return LossBreakdown(recon - entropy + log_z, recon, zero, entropy, log_z, zero)


def _pivae(state, data, noise):
    x_phy, kl = _physical_branch(state, data, noise["phy"])
    recon = gaussian_log_lik(data["x"], x_phy, state.obs_sd)
    zero = _zero()
    return LossBreakdown(recon - kl, recon, kl, zero, zero, zero)


def _pigpvae(state, data, noise):
    x = data["x"]
    x_phy, kl = _physical_branch(state, data, noise["phy"])
    if state.has_gp:
        z_delta, entropy, log_z = _gp_branch(state, x, noise["gp"])
        x_hat = x_phy + discrepancy(state.delta_decoder, z_delta, x_phy,
                                    state.config.anchor_discrepancy)
    else:
        entropy = log_z = _zero()
        x_hat = x_phy
    recon = gaussian_log_lik(x, x_hat, state.obs_sd)
    reg = state.alpha * ((x - x_phy) ** 2).mean(-1).mean(0).sum()
    total = recon - entropy + log_z - kl - reg
    return LossBreakdown(total, recon, kl, entropy, log_z, reg)


_OBJECTIVES = {"vae": _vae, "gpvae": _gpvae, "pivae": _pivae, "pigpvae": _pigpvae}


def loss_breakdown(state: GenerativeModel, data: dict, noise: dict) -> LossBreakdown:
    """Objective of ``state.kind`` on prepared tensors and pre-drawn noise."""
    return _OBJECTIVES[state.kind](state, data, noise)


def objective(state: GenerativeModel, batch: SeriesBatch, seed) -> LossBreakdown:
    data = prepare(state, batch)
    noise = draw_noise(state, len(batch), np.random.default_rng(seed))
    return loss_breakdown(state, data, noise)


def vae_elbo(state, batch, seed) -> LossBreakdown:
    _check_kind(state, "vae")
    return objective(state, batch, seed)


def gpvae_elbo(state, batch, seed) -> LossBreakdown:
    _check_kind(state, "gpvae")
    return objective(state, batch, seed)


def pivae_elbo(state, batch, seed) -> LossBreakdown:
    _check_kind(state, "pivae")
    return objective(state, batch, seed)


def pigpvae_loss(state, batch, seed) -> LossBreakdown:
    _check_kind(state, "pigpvae")
    return objective(state, batch, seed)


# ---------------------------------------------------------------------------
# decoding, generation, reconstruction


def discrepancy(delta_net, z_delta, x_phy, anchor: bool = True):
    """Pointwise discrepancy; with ``anchor`` its value at the first grid point is
    subtracted so the full curve still starts at the conditioned T0."""
    delta = decode_delta(delta_net, z_delta, x_phy)
    return delta - delta[..., :1] if anchor else delta


def pigpvae_decode(z_phy, z_delta, time_grid, t0, ts, phys_normalizer, delta_net,
                   anchor: bool = True):
    """Full PIGPVAE decoder; returns ``(x_hat, x_phy)`` in normalized units.

    ``delta_net=None`` (or ``z_delta=None``) disables the discrepancy, giving
    ``x_hat = x_phy``.
    """
    x_phy = physical_decode(z_phy, time_grid, t0, ts, phys_normalizer)
    if delta_net is None or z_delta is None:
        return x_phy, x_phy
    return x_phy + discrepancy(delta_net, z_delta, x_phy, anchor), x_phy


def _require_trained(state):
    if not state.trained:
        raise UsageError("model has not been trained")


def sample_conditions(state: GenerativeModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Resample training ``(t0, ts)`` pairs with Gaussian jitter."""
    if len(state.conditions) == 0:
        raise UsageError("model carries no training conditions to resample")
    idx = rng.integers(len(state.conditions), size=n)
    jitter = rng.normal(0.0, state.config.condition_jitter_sd, size=(n, 2))
    cond = state.conditions[idx] + jitter
    if state.mode == "heating":
        cond[:, 1] = np.maximum(cond[:, 1], cond[:, 0])
    else:
        cond[:, 1] = np.minimum(cond[:, 1], cond[:, 0])
    return cond


@torch.no_grad()
def _decode_prior(state: GenerativeModel, t0, ts, rng) -> np.ndarray:
    N = len(t0)
    L, T = state.config.latent_dim, state.n_steps
    grid = state.time_grid
    if state.kind in PHYSICS_KINDS:
        z_phy = state.prior.mean + state.prior.sd * torch.from_numpy(rng.standard_normal((N, 1)))
        z_delta = gp.sample_prior(grid, state.kernel_params, L, rng, n=N) if state.has_gp else None
        x, _ = pigpvae_decode(
            z_phy, z_delta, grid, torch.from_numpy(t0), torch.from_numpy(ts),
            state.normalizer, getattr(state, "delta_decoder", None),
            state.config.anchor_discrepancy,
        )
    elif state.kind == "gpvae":
        z = gp.sample_prior(grid, state.kernel_params, L, rng, n=N)
        x = decode_pointwise(state.decoder, z)
    else:
        z = torch.from_numpy(rng.standard_normal((N, L)))
        x = state.decoder(z)
    assert x.shape == (N, T)
    return state.normalizer.invert(x.numpy())


def generate(state: GenerativeModel, conditions, n_per_cond: int = 1, seed=0) -> SeriesBatch:
    """Generate ``n_per_cond`` curves per ``(t0, ts)`` pair, in degrees C.

    Unconditional kinds (vae, gpvae) ignore the pairs with a warning and
    simply produce the same number of curves; the pairs are still attached as
    metadata.
    """
    _require_trained(state)
    cond = np.asarray(conditions, dtype=np.float64).reshape(-1, 2)
    cond = np.repeat(cond, n_per_cond, axis=0)
    if state.kind not in PHYSICS_KINDS:
        warnings.warn("unconditional model ignores conditioning", stacklevel=2)
    rng = np.random.default_rng(seed)
    return _to_batch(state, _decode_prior(state, cond[:, 0], cond[:, 1], rng), cond)


def generate_like(state: GenerativeModel, n: int, seed=0) -> SeriesBatch:
    """In-distribution generation: conditions resampled from training pairs."""
    _require_trained(state)
    rng = np.random.default_rng(seed)
    cond = sample_conditions(state, n, rng)
    return _to_batch(state, _decode_prior(state, cond[:, 0], cond[:, 1], rng), cond)


def _to_batch(state, values, cond) -> SeriesBatch:
    return SeriesBatch(
        values,
        state.time_grid.numpy(),
        cond[:, 1],
        state.mode,
        ids=tuple(f"g{i:04d}" for i in range(len(values))),
        validate=False,
    )


@torch.no_grad()
def reconstruct(state: GenerativeModel, batch: SeriesBatch, seed=0):
    """Decode posterior-mean latents; returns ``(x_hat, x_phy or None)`` in degrees C.

    Deterministic: ``seed`` is accepted for interface symmetry only.
    """
    _require_trained(state)
    data = prepare(state, batch)
    x = data["x"]
    x_phy = None
    if state.kind == "vae":
        out = state.encoder(x)
        x_hat = state.decoder(out[..., : state.config.latent_dim])
    elif state.kind == "gpvae":
        pseudo = encode_gp(state.gp_encoder, x, state.config.latent_dim)
        post = gp.gp_posterior(state.time_grid, pseudo, state.kernel_params)
        x_hat = decode_pointwise(state.decoder, post.mean)
    else:
        q = encode_phys(state.phys_encoder, x)
        z_delta = None
        if state.has_gp:
            pseudo = encode_gp(state.gp_encoder, x, state.config.latent_dim)
            z_delta = gp.gp_posterior(state.time_grid, pseudo, state.kernel_params).mean
        x_hat, x_phy = pigpvae_decode(
            q.mean, z_delta, state.time_grid, data["t0"], data["ts"],
            state.normalizer, getattr(state, "delta_decoder", None),
            state.config.anchor_discrepancy,
        )
        x_phy = state.normalizer.invert(x_phy.numpy())
    return state.normalizer.invert(x_hat.numpy()), x_phy


@torch.no_grad()
def posterior_rates(state: GenerativeModel, batch: SeriesBatch) -> np.ndarray:
    """``softplus`` of the posterior mean rate latent for each curve."""
    if state.kind not in PHYSICS_KINDS:
        raise UsageError(f"{state.kind} has no physical latent")
    q = encode_phys(state.phys_encoder, prepare(state, batch)["x"])
    return F.softplus(q.mean).squeeze(-1).numpy()


def build_model(config: ModelConfig, train: SeriesBatch, normalizer: Normalizer, seed: int = 0):
    return GenerativeModel(
        config,
        train.time_grid,
        normalizer,
        mode=train.mode,
        conditions=np.column_stack([train.t0, train.ts]),
        seed=seed,
    )
