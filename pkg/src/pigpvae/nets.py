"""Small MLPs used as encoders and as the time-shared discrepancy decoder.

Reverse-mode differentiation is torch autograd; parameters are float64
``nn.Parameter`` tensors initialized from a numpy generator so that a given
seed yields the same weights on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .gp import PseudoObservations

SD_FLOOR = 1e-6

_ACTIVATIONS = {"tanh": torch.tanh, "relu": torch.relu}


class ShapeError(ValueError):
    pass


class Mlp(nn.Module):
    """Affine layers with a hidden activation and a linear output layer."""

    def __init__(self, widths: Sequence[int], activation: str = "tanh", rng=None):
        super().__init__()
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"invalid layer widths {widths}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=torch.float64) for a, b in zip(widths[:-1], widths[1:])
        )
        self.reset_parameters(rng if rng is not None else np.random.default_rng(0))

    def reset_parameters(self, rng: np.random.Generator):
        """Weights ~ N(0, 1/fan_in), biases zero."""
        with torch.no_grad():
            for layer in self.layers:
                fan_in = layer.in_features
                w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(layer.out_features, fan_in))
                layer.weight.copy_(torch.from_numpy(w))
                layer.bias.zero_()

    def forward(self, x):
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(f"expected input width {self.widths[0]}, got {x.shape[-1]}")
        act = _ACTIVATIONS[self.activation]
        for layer in self.layers[:-1]:
            x = act(layer(x))
        return self.layers[-1](x)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def mlp_forward(net: Mlp, x):
    return net(torch.as_tensor(x, dtype=torch.float64))


def positive_sd(pre):
    return F.softplus(pre) + SD_FLOOR


@dataclass
class DiagGaussian:
    mean: torch.Tensor
    sd: torch.Tensor

    def sample_with(self, eps):
        return self.mean + self.sd * eps


def encode_gp(net: Mlp, x, n_channels: int):
    """Map curves ``(..., T)`` to pseudo-observation targets and noise sds.

    The net's output has width ``2 * n_channels * T``: first the targets,
    then the pre-softplus noise sds, each reshaped to ``(..., L, T)``.
    """
    T = x.shape[-1]
    out = net(x)
    if out.shape[-1] != 2 * n_channels * T:
        raise ShapeError(f"encoder output width {out.shape[-1]} != 2*{n_channels}*{T}")
    shape = tuple(x.shape[:-1]) + (n_channels, T)
    targets, pre = out.split(n_channels * T, dim=-1)
    return PseudoObservations(targets.reshape(shape), positive_sd(pre.reshape(shape)))


def encode_phys(net: Mlp, x) -> DiagGaussian:
    """Curve ``(..., T)`` -> Gaussian over the unconstrained rate latent, shape ``(..., 1)``."""
    out = net(x)
    if out.shape[-1] != 2:
        raise ShapeError(f"physical encoder must output 2 values, got {out.shape[-1]}")
    return DiagGaussian(out[..., :1], positive_sd(out[..., 1:]))


def decode_delta(net: Mlp, z_delta, x_phy):
    """Pointwise discrepancy: ``(z_delta[:, t], x_phy[t]) -> delta[t]`` with shared weights.

    ``z_delta`` has shape ``(..., L, T)`` and ``x_phy`` shape ``(..., T)``.
    """
    if z_delta.shape[-1] != x_phy.shape[-1] or z_delta.shape[:-2] != x_phy.shape[:-1]:
        raise ShapeError(
            f"z_delta {tuple(z_delta.shape)} incompatible with x_phy {tuple(x_phy.shape)}"
        )
    inputs = torch.cat([z_delta.transpose(-1, -2), x_phy.unsqueeze(-1)], dim=-1)
    return net(inputs).squeeze(-1)


def decode_pointwise(net: Mlp, z):
    """Time-shared decoder ``z[:, t] -> x[t]`` for latents of shape ``(..., L, T)``."""
    return net(z.transpose(-1, -2)).squeeze(-1)
