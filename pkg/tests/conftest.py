import numpy as np
import pytest
import torch

from pigpvae.data import fit_normalizer, synthesize_surrogate
from pigpvae.models import ModelConfig, build_model

torch.set_num_threads(1)


@pytest.fixture
def small_batch():
    return synthesize_surrogate(5, 6, "heating", noise_cfg={"amplitude": 0.5}, seed=3)


def make_state(kind, batch, seed=0, **overrides):
    cfg = ModelConfig.from_dict({"kind": kind, "hidden": [8], "decoder_hidden": [6], **overrides})
    state = build_model(cfg, batch, fit_normalizer(batch), seed=seed)
    state.trained = True
    return state


def dense_mvn_logpdf(x, cov):
    """log N(x; 0, cov) via explicit inverse and determinant."""
    x = np.asarray(x, float)
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return -0.5 * (x @ np.linalg.inv(cov) @ x + logdet + len(x) * np.log(2 * np.pi))


def random_pd(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T + n * np.eye(n)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
