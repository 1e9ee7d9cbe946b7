import json

import numpy as np
import pytest
import torch

from pigpvae.checkpoint import dumps, load_checkpoint, save_checkpoint, state_from_dict, state_to_dict
from pigpvae.models import generate_like, objective

from conftest import make_state


@pytest.mark.parametrize("kind", ["vae", "gpvae", "pivae", "pigpvae"])
def test_round_trip_is_bit_exact(kind, small_batch, tmp_path):
    state = make_state(kind, small_batch, seed=3)
    with torch.no_grad():
        for p in state.parameters():
            p.add_(torch.from_numpy(np.random.default_rng(0).normal(size=p.shape)) * 1e-3)
    path = tmp_path / "ck.json"
    save_checkpoint(state, path)
    back = load_checkpoint(path)
    for (n, a), (_, b) in zip(state.named_parameters(), back.named_parameters()):
        assert torch.equal(a, b), n
    assert dumps(back) == dumps(state)
    assert objective(state, small_batch, 1).as_floats() == objective(back, small_batch, 1).as_floats()
    assert generate_like(state, 4, 2).values.tobytes() == generate_like(back, 4, 2).values.tobytes()


def test_checkpoint_contents(small_batch):
    doc = state_to_dict(make_state("pigpvae", small_batch))
    assert doc["model_kind"] == "pigpvae"
    assert {"kernel", "alpha", "obs_sd", "normalizer", "conditions"} <= set(doc)
    json.dumps(doc)


def test_rejects_foreign_layout(small_batch):
    doc = state_to_dict(make_state("pivae", small_batch))
    doc["parameters"]["extra.weight"] = {"shape": [1], "values": [0.0]}
    with pytest.raises(ValueError, match="layout"):
        state_from_dict(doc)
    doc["format_version"] = 99
    with pytest.raises(ValueError, match="format"):
        state_from_dict(doc)
