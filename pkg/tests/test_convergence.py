"""Properties of full-length training runs on the default surrogate."""

import numpy as np
import pytest

from pigpvae.config import DEFAULTS
from pigpvae.data import SplitSpec, fit_normalizer, split, synthesize_surrogate
from pigpvae.models import ModelConfig, reconstruct
from pigpvae.training import TrainConfig, train


@pytest.fixture(scope="module")
def pigpvae_run():
    s = DEFAULTS["data"]["surrogate"]["heating"]
    batch = synthesize_surrogate(s["n"], 24, "heating", s["k_mean"], s["k_sd"], s["noise"],
                                 s["seed"], tuple(s["t0_range"]), tuple(s["gap_range"]))
    train_batch, _ = split(batch, SplitSpec(0.7, seed=0))
    trace = train(ModelConfig(), train_batch, TrainConfig(), fit_normalizer(train_batch))
    return train_batch, trace


def test_reconstruction_rmse(pigpvae_run):
    batch, trace = pigpvae_run
    x_hat, x_phy = reconstruct(trace.state, batch)
    rmse = float(np.sqrt(np.mean((x_hat - batch.values) ** 2)))
    assert rmse < 0.5
    # the discrepancy branch must be doing part of the work
    assert rmse < float(np.sqrt(np.mean((x_phy - batch.values) ** 2)))


def _smoothed_steps(trace, warmup=100):
    total = np.array([h["total"] for h in trace.history])
    smooth = np.convolve(total, np.ones(10) / 10, mode="valid")
    return smooth[warmup:]


def test_smoothed_objective_trends_up(pigpvae_run):
    smooth = _smoothed_steps(pigpvae_run[1])
    assert smooth[-1] > smooth[0]
    thirds = np.array_split(smooth, 3)
    assert thirds[0].mean() < thirds[1].mean() < thirds[2].mean()


@pytest.mark.xfail(reason="once the objective plateaus, epoch-to-epoch changes of a single-sample "
                          "ELBO are zero-mean noise; about half the epochs improve", strict=False)
def test_smoothed_objective_improves_in_95_percent_of_epochs(pigpvae_run):
    steps = np.diff(_smoothed_steps(pigpvae_run[1]))
    assert np.mean(steps > 0) >= 0.95


@pytest.mark.xfail(reason="global gradient norm stays above the default clip of 10 at convergence "
                          "because reparameterization noise keeps full-batch gradients large",
                   strict=False)
def test_clip_inactive_at_convergence(pigpvae_run):
    _, trace = pigpvae_run
    assert max(trace.grad_norms[-100:]) <= TrainConfig().clip_norm
