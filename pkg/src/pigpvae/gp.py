"""Gaussian-process numerics on a shared time grid.

Everything here operates on torch tensors so that the log marginal
likelihood and the posterior moments are differentiable with respect to the
kernel hyperparameters and the pseudo-observations produced by an encoder.
Pseudo-observation tensors have shape ``(..., L, T)``: any number of leading
batch dimensions, ``L`` latent channels and ``T`` time steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

LOG_2PI = math.log(2.0 * math.pi)
MIN_NOISE_SD = 1e-6


class NumericalError(RuntimeError):
    """Cholesky factorization failed even after jitter escalation."""

    def __init__(self, message, minor_index=None):
        super().__init__(message)
        self.minor_index = minor_index


def _tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


@dataclass
class KernelParams:
    """Squared-exponential kernel hyperparameters.

    ``lengthscale`` and ``variance`` may be plain floats or (trainable)
    0-dim tensors.
    """

    lengthscale: float | torch.Tensor = 0.2
    variance: float | torch.Tensor = 1.0
    jitter: float = 1e-6

    def __post_init__(self):
        for name in ("lengthscale", "variance"):
            value = getattr(self, name)
            if not torch.all(torch.as_tensor(value) > 0):
                raise ValueError(f"kernel {name} must be positive, got {value}")
        if not 0 < self.jitter <= 1e-3:
            raise ValueError(f"jitter must lie in (0, 1e-3], got {self.jitter}")


@dataclass
class PseudoObservations:
    targets: torch.Tensor
    noise_sd: torch.Tensor

    def __post_init__(self):
        if self.targets.shape != self.noise_sd.shape:
            raise ValueError(
                f"targets {tuple(self.targets.shape)} vs noise_sd {tuple(self.noise_sd.shape)}"
            )


@dataclass
class GpPosterior:
    mean: torch.Tensor  # (..., L, T)
    cov: torch.Tensor  # (..., L, T, T)

    @property
    def marginal_var(self):
        return torch.diagonal(self.cov, dim1=-2, dim2=-1)


def kernel_matrix(time_grid, params: KernelParams) -> torch.Tensor:
    """``K[i, j] = s2 exp(-(t_i - t_j)^2 / (2 l^2)) + jitter 1{i=j}``."""
    t = _tensor(time_grid)
    ell = _tensor(params.lengthscale, t)
    s2 = _tensor(params.variance, t)
    if t.ndim != 1:
        raise ValueError("time grid must be one-dimensional")
    diff = t[:, None] - t[None, :]
    K = s2 * torch.exp(-0.5 * (diff / ell) ** 2)
    return K + params.jitter * torch.eye(t.shape[0], dtype=t.dtype)


def cholesky(K_pd: torch.Tensor, jitter: float = 1e-6) -> torch.Tensor:
    """Lower Cholesky factor, retrying once with ``10 * jitter`` on the diagonal."""
    L, info = torch.linalg.cholesky_ex(K_pd)
    if torch.any(info > 0):
        eye = torch.eye(K_pd.shape[-1], dtype=K_pd.dtype)
        L, info = torch.linalg.cholesky_ex(K_pd + 10.0 * jitter * eye)
        if torch.any(info > 0):
            minor = int(info[info > 0].flatten()[0])
            raise NumericalError(
                f"Cholesky failed at leading minor {minor} after jitter escalation",
                minor_index=minor,
            )
    return L


def chol_solve(K_pd, B, jitter: float = 1e-6):
    """Solve ``K_pd X = B`` and return ``(X, log det K_pd)`` via Cholesky."""
    K_pd = _tensor(K_pd)
    B = _tensor(B, K_pd)
    L = cholesky(K_pd, jitter)
    X = torch.cholesky_solve(B, L)
    logdet = 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
    return X, logdet


def _noisy_factor(K, pseudo: PseudoObservations, jitter):
    D = torch.diag_embed(pseudo.noise_sd**2)
    return cholesky(K + D, jitter)


def _posterior_from_factor(K, L, targets):
    A = torch.linalg.solve_triangular(L, K.expand_as(L), upper=False)  # L^-1 K
    w = torch.linalg.solve_triangular(L, targets.unsqueeze(-1), upper=False)
    mean = (A.transpose(-1, -2) @ w).squeeze(-1)
    cov = K - A.transpose(-1, -2) @ A
    return GpPosterior(mean, 0.5 * (cov + cov.transpose(-1, -2))), w.squeeze(-1)


def _log_marginal_from_factor(L, w):
    T = L.shape[-1]
    half_logdet = torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
    return (-0.5 * (w**2).sum(-1) - half_logdet - 0.5 * T * LOG_2PI).sum()


def gp_posterior(time_grid, pseudo: PseudoObservations, params: KernelParams) -> GpPosterior:
    """Exact GP regression of each channel on its heteroscedastic pseudo-observations.

    mean = K (K + D)^-1 x~,   cov = K - K (K + D)^-1 K,   D = diag(noise_sd^2).
    """
    K = kernel_matrix(time_grid, params).to(pseudo.targets.dtype)
    L = _noisy_factor(K, pseudo, params.jitter)
    return _posterior_from_factor(K, L, pseudo.targets)[0]


def gp_log_marginal(time_grid, pseudo: PseudoObservations, params: KernelParams) -> torch.Tensor:
    """``sum_l log N(x~_l; 0, K + D_l)``, summed over channels and leading dims."""
    K = kernel_matrix(time_grid, params).to(pseudo.targets.dtype)
    L = _noisy_factor(K, pseudo, params.jitter)
    w = torch.linalg.solve_triangular(L, pseudo.targets.unsqueeze(-1), upper=False)
    return _log_marginal_from_factor(L, w.squeeze(-1))


def posterior_and_log_marginal(time_grid, pseudo: PseudoObservations, params: KernelParams):
    """Both of the above from a single factorization of ``K + D``."""
    K = kernel_matrix(time_grid, params).to(pseudo.targets.dtype)
    L = _noisy_factor(K, pseudo, params.jitter)
    post, w = _posterior_from_factor(K, L, pseudo.targets)
    return post, _log_marginal_from_factor(L, w)


def expected_log_pseudo_likelihood(pseudo: PseudoObservations, post: GpPosterior) -> torch.Tensor:
    """Closed form of ``E_q[log q*(z|x)]`` where ``q*`` is the pseudo-likelihood.

    Per channel and step: ``log N(x~_t; m_t, s~_t^2) - v_t / (2 s~_t^2)`` with
    ``(m_t, v_t)`` the posterior marginal mean and variance.
    """
    var = pseudo.noise_sd**2
    resid = pseudo.targets - post.mean
    log_dens = -0.5 * (LOG_2PI + torch.log(var) + resid**2 / var)
    return (log_dens - post.marginal_var / (2.0 * var)).sum()


def _standard_normal(shape, seed):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return torch.from_numpy(rng.standard_normal(shape))


def sample_prior(time_grid, params: KernelParams, L: int, seed, n: int | None = None):
    """Draw ``L`` prior paths (or ``(n, L, T)`` if ``n`` is given)."""
    K = kernel_matrix(time_grid, params)
    chol = cholesky(K, params.jitter)
    T = K.shape[-1]
    shape = (L, T) if n is None else (n, L, T)
    eps = _standard_normal(shape, seed).to(K.dtype)
    return eps @ chol.transpose(-1, -2)


def posterior_factor(post: GpPosterior, jitter: float = 1e-6) -> torch.Tensor:
    eye = torch.eye(post.cov.shape[-1], dtype=post.cov.dtype)
    return cholesky(post.cov + jitter * eye, jitter)


def sample_posterior_with(post: GpPosterior, eps: torch.Tensor, jitter: float = 1e-6):
    """Reparameterized draw ``m + chol(cov + jitter I) eps``; differentiable."""
    chol = posterior_factor(post, jitter)
    return post.mean + (chol @ eps.unsqueeze(-1)).squeeze(-1)


def sample_posterior(post: GpPosterior, seed, jitter: float = 1e-6):
    eps = _standard_normal(tuple(post.mean.shape), seed).to(post.mean.dtype)
    return sample_posterior_with(post, eps, jitter)
