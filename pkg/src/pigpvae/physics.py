"""Newton's law of heating/cooling as a decoder, plus the rate-prior KL.

The rate constant ``k`` is parameterized as ``softplus(z)`` of an
unconstrained latent ``z``; prior and posterior are Gaussians over ``z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .nets import DiagGaussian


def softplus(x):
    if isinstance(x, torch.Tensor):
        return F.softplus(x)
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inverse(y: float) -> float:
    if not y > 0:
        raise ValueError("softplus inverse needs a positive argument")
    # log(expm1(y)) overflows for large y; y + log1p(-exp(-y)) does not
    return y + math.log(-math.expm1(-y))


@dataclass(frozen=True)
class PhysicalPrior:
    mean: float = softplus_inverse(2.0)
    sd: float = 0.5

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError("prior sd must be positive")


def newton_solution(t, t0, ts, k):
    """``T(t) = (t0 - ts) exp(-k t) + ts``, broadcasting over all arguments."""
    exp = torch.exp if any(isinstance(a, torch.Tensor) for a in (t, t0, ts, k)) else np.exp
    return (t0 - ts) * exp(-k * t) + ts


def kl_gauss_gauss(q: DiagGaussian, p: PhysicalPrior):
    """KL(N(mu_q, s_q^2) || N(mu_p, s_p^2)) summed over all dimensions."""
    sd_q = q.sd
    if torch.any(torch.as_tensor(sd_q) <= 0):
        raise ValueError("posterior sd must be positive")
    mu_p, sd_p = p.mean, p.sd
    log = torch.log if isinstance(sd_q, torch.Tensor) else np.log
    terms = log(sd_p / sd_q) + (sd_q**2 + (q.mean - mu_p) ** 2) / (2.0 * sd_p**2) - 0.5
    return terms.sum()


def kl_standard_normal(mean, sd):
    """Closed-form KL of a diagonal Gaussian from N(0, I)."""
    var = sd**2
    log = torch.log if isinstance(var, torch.Tensor) else np.log
    return 0.5 * (var + mean**2 - 1.0 - log(var)).sum()


def physical_decode(z_phy, time_grid, t0, ts, normalizer=None):
    """Decode a rate latent into a Newton curve.

    ``z_phy`` has shape ``(..., 1)``, ``t0`` and ``ts`` shape ``(...,)`` in
    degrees C.  The curve is computed in degrees C, then mapped through
    ``normalizer.apply`` when one is given.
    """
    k = softplus(z_phy)
    curve = newton_solution(time_grid, t0[..., None], ts[..., None], k)
    return normalizer.apply(curve) if normalizer is not None else curve
