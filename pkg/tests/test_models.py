import math

import numpy as np
import pytest
import torch

from pigpvae.data import SeriesBatch, fit_normalizer, synthesize_surrogate
from pigpvae.models import (
    ModelConfig,
    UsageError,
    build_model,
    discrepancy,
    generate,
    generate_like,
    gpvae_elbo,
    objective,
    pigpvae_decode,
    pigpvae_loss,
    pivae_elbo,
    reconstruct,
    vae_elbo,
)
from pigpvae.physics import softplus_inverse
from pigpvae.training import grad_check

from conftest import make_state

OBJECTIVES = {"vae": vae_elbo, "gpvae": gpvae_elbo, "pivae": pivae_elbo, "pigpvae": pigpvae_loss}


def _zero_net(net):
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()


def _set_obs_sd(state, sd):
    with torch.no_grad():
        state.obs_sd_raw.fill_(softplus_inverse(sd - 1e-4))


def _pin_gaussian_head(net, mean, sd, n_latent=1):
    """Zero a net and set its output biases to a fixed (mean, sd) head."""
    _zero_net(net)
    with torch.no_grad():
        net.layers[-1].bias[:n_latent] = mean
        net.layers[-1].bias[n_latent:] = softplus_inverse(sd - 1e-6)


@pytest.mark.parametrize("kind", list(OBJECTIVES))
def test_objective_gradients_match_finite_differences(kind, small_batch):
    state = make_state(kind, small_batch, seed=1, train_kernel=True)
    params = {n: p for n, p in state.named_parameters() if p.requires_grad}
    report = grad_check(lambda: OBJECTIVES[kind](state, small_batch, 7).total, params)
    assert report.passed, report


@pytest.mark.parametrize("kind", list(OBJECTIVES))
def test_kind_mismatch(kind, small_batch):
    other = "vae" if kind != "vae" else "pivae"
    state = make_state(other, small_batch)
    with pytest.raises(UsageError):
        OBJECTIVES[kind](state, small_batch, 0)


def test_vae_prior_pinned_encoder_has_zero_kl(small_batch):
    state = make_state("vae", small_batch, latent_dim=2)
    _pin_gaussian_head(state.encoder, 0.0, 1.0, n_latent=2)
    assert abs(vae_elbo(state, small_batch, 0).as_floats()["kl_phys"]) < 1e-12


def test_vae_perfect_decoder_recon():
    T = 5
    values = np.tile(np.linspace(20, 24, T), (3, 1))
    batch = SeriesBatch(values, np.linspace(0, 1, T), [30.0] * 3, "heating")
    state = make_state("vae", batch, latent_dim=1)
    _zero_net(state.decoder)
    with torch.no_grad():
        state.decoder.layers[-1].bias.copy_(torch.from_numpy(state.normalizer.apply(values[0])))
    _set_obs_sd(state, 1.0)
    recon = vae_elbo(state, batch, 0).as_floats()["recon"]
    assert recon == pytest.approx(-3 * (T / 2) * math.log(2 * math.pi), abs=1e-10)


def test_vae_elbo_monte_carlo():
    batch = synthesize_surrogate(2, 3, "heating", seed=1)
    state = make_state("vae", batch, latent_dim=1, hidden=[4])
    with torch.no_grad():
        single = np.array([float(vae_elbo(state, batch, s).total) for s in range(4000)])
        state.config.n_samples = 200_000
        oracle = float(vae_elbo(state, batch, 10**6).total)
    se = single.std(ddof=1) / math.sqrt(len(single))
    assert abs(single.mean() - oracle) < 3 * se


def test_gpvae_prior_limit_is_finite_and_clean(small_batch):
    state = make_state("gpvae", small_batch)
    with torch.no_grad():
        state.gp_encoder.layers[-1].weight[-2 * 6:].zero_()
        state.gp_encoder.layers[-1].bias[2 * 6:] = 1e6
    lb = gpvae_elbo(state, small_batch, 0)
    assert all(math.isfinite(v) for v in lb.as_floats().values())
    lb.total.backward()
    assert all(torch.isfinite(p.grad).all() for p in state.parameters() if p.grad is not None)


def test_pivae_pinned_prior_has_zero_kl(small_batch):
    state = make_state("pivae", small_batch)
    _pin_gaussian_head(state.phys_encoder, state.prior.mean, state.prior.sd)
    assert abs(pivae_elbo(state, small_batch, 0).as_floats()["kl_phys"]) < 1e-12


def test_pivae_exact_newton_data_recon():
    k = 2.0
    batch = synthesize_surrogate(4, 6, "cooling", k_mean=k, k_sd=0.0, noise_cfg={"amplitude": 0.0})
    state = make_state("pivae", batch)
    _pin_gaussian_head(state.phys_encoder, softplus_inverse(k), 1.0)
    with torch.no_grad():
        state.phys_encoder.layers[-1].bias[1] = -60.0
    _set_obs_sd(state, 0.3)
    recon = pivae_elbo(state, batch, 0).as_floats()["recon"]
    assert recon == pytest.approx(-4 * (6 / 2) * math.log(2 * math.pi * 0.09), rel=1e-8)


def test_ablation_identity(small_batch):
    pi = make_state("pivae", small_batch, seed=4)
    pig = make_state("pigpvae", small_batch, seed=4, latent_dim=0)
    a = pivae_elbo(pi, small_batch, 3).as_floats()
    b = pigpvae_loss(pig, small_batch, 3).as_floats()
    for term in ("recon", "kl_phys", "gp_entropy_term", "log_z"):
        assert abs(a[term] - b[term]) <= 1e-10
    assert abs(a["total"] - (b["total"] + b["reg"])) <= 1e-10
    cond = [[17.0, 27.0], [18.0, 21.0]]
    assert generate(pi, cond, 5, 9).values.tobytes() == generate(pig, cond, 5, 9).values.tobytes()


def test_zero_alpha_limit(small_batch):
    state = make_state("pigpvae", small_batch)
    with torch.no_grad():
        state.alpha_raw.fill_(-800.0)
    lb = pigpvae_loss(state, small_batch, 0).as_floats()
    assert lb["reg"] == 0.0
    assert lb["total"] == pytest.approx(lb["recon"] - lb["gp_entropy_term"] + lb["log_z"] - lb["kl_phys"],
                                        abs=1e-10)


def test_trainable_alpha_respects_floor(small_batch):
    state = make_state("pigpvae", small_batch, alpha_mode="trainable", alpha=1.0)
    assert float(state.alpha.detach()) == pytest.approx(1.0)
    with torch.no_grad():
        state.alpha_raw.fill_(-100.0)
    assert float(state.alpha.detach()) == pytest.approx(0.1)
    assert state.alpha_raw.requires_grad


def _decode_inputs(L=2, T=6, seed=0):
    rng = np.random.default_rng(seed)
    grid = torch.from_numpy(np.linspace(0, 1, T))
    z_phy = torch.from_numpy(rng.normal(size=(3, 1)))
    z_delta = torch.from_numpy(rng.normal(size=(3, L, T)))
    t0 = torch.tensor([18.0, 20.0, 25.0], dtype=torch.float64)
    return z_phy, z_delta, grid, t0, t0 + 5.0


@pytest.mark.parametrize("anchor", [True, False])
def test_decoder_is_additive(small_batch, anchor):
    state = make_state("pigpvae", small_batch, anchor_discrepancy=anchor)
    z_phy, z_delta, grid, t0, ts = _decode_inputs()
    x_hat, x_phy = pigpvae_decode(z_phy, z_delta, grid, t0, ts, state.normalizer,
                                  state.delta_decoder, anchor)
    delta = discrepancy(state.delta_decoder, z_delta, x_phy, anchor)
    assert torch.equal(x_hat - x_phy, (x_phy + delta) - x_phy)
    assert torch.allclose(x_hat - x_phy, delta, atol=1e-14)
    _zero_net(state.delta_decoder)
    x_hat, x_phy = pigpvae_decode(z_phy, z_delta, grid, t0, ts, state.normalizer,
                                  state.delta_decoder, anchor)
    assert torch.equal(x_hat, x_phy)


def test_decoder_gradient_wrt_latents(small_batch):
    state = make_state("pigpvae", small_batch)
    z_phy, z_delta, grid, t0, ts = _decode_inputs()
    z_phy.requires_grad_()
    z_delta.requires_grad_()

    def f():
        x_hat, _ = pigpvae_decode(z_phy, z_delta, grid, t0, ts, state.normalizer, state.delta_decoder)
        return (x_hat**2).sum()

    assert grad_check(f, {"z_phy": z_phy, "z_delta": z_delta}).passed


def test_anchored_generation_starts_at_t0(small_batch):
    anchored = make_state("pigpvae", small_batch, seed=2)
    free = make_state("pigpvae", small_batch, seed=2, anchor_discrepancy=False)
    a = generate(anchored, [[17.0, 24.0]], 50, 1)
    b = generate(free, [[17.0, 24.0]], 50, 1)
    assert np.max(np.abs(a.t0 - 17.0)) < 1e-9
    assert np.max(np.abs(b.t0 - 17.0)) > 1e-3


def test_pivae_generation_pins_start_and_is_monotone(small_batch):
    state = make_state("pivae", small_batch)
    out = generate(state, [[17.0, 27.0]], 1000, 0)
    assert np.max(np.abs(out.t0 - 17.0)) <= 1e-9
    assert np.all(np.diff(out.values, axis=1) >= -1e-9)
    assert np.all(out.values <= 27.0 + 1e-9)


def test_pigpvae_zero_discrepancy_matches_pivae(small_batch):
    pi = make_state("pivae", small_batch, seed=5)
    pig = make_state("pigpvae", small_batch, seed=5)
    _zero_net(pig.delta_decoder)
    cond = [[16.0, 22.0]]
    assert generate(pi, cond, 20, 3).values.tobytes() == generate(pig, cond, 20, 3).values.tobytes()


def test_unconditional_generation_warns(small_batch):
    state = make_state("gpvae", small_batch)
    with pytest.warns(UserWarning, match="unconditional model ignores conditioning"):
        out = generate(state, [[17.0, 25.0]], 4, 0)
    assert len(out) == 4


def test_generation_deterministic(small_batch):
    for kind in OBJECTIVES:
        state = make_state(kind, small_batch)
        a, b = generate_like(state, 6, 11), generate_like(state, 6, 11)
        assert a.values.tobytes() == b.values.tobytes()


def test_untrained_state_rejected(small_batch):
    state = make_state("pivae", small_batch)
    state.trained = False
    with pytest.raises(UsageError):
        generate(state, [[17.0, 27.0]])
    with pytest.raises(UsageError):
        reconstruct(state, small_batch)


def test_reconstruct_zero_discrepancy_components(small_batch):
    state = make_state("pigpvae", small_batch)
    _zero_net(state.delta_decoder)
    x_hat, x_phy = reconstruct(state, small_batch)
    np.testing.assert_array_equal(x_hat, x_phy)
    again, _ = reconstruct(state, small_batch)
    assert x_hat.tobytes() == again.tobytes()


def test_objective_deterministic_under_seed(small_batch):
    state = make_state("pigpvae", small_batch)
    assert objective(state, small_batch, 3).as_floats() == objective(state, small_batch, 3).as_floats()
    assert objective(state, small_batch, 3).as_floats() != objective(state, small_batch, 4).as_floats()


def test_config_validation():
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"kind": "pivae", "latnet_dim": 3})
    with pytest.raises(ValueError):
        ModelConfig(kind="gpvae", latent_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(kind="transformer")


def test_shared_seed_shares_physical_encoder(small_batch):
    a = make_state("pivae", small_batch, seed=8)
    b = make_state("pigpvae", small_batch, seed=8)
    for pa, pb in zip(a.phys_encoder.parameters(), b.phys_encoder.parameters()):
        assert torch.equal(pa, pb)
