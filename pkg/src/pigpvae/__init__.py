"""Physics-informed GP-prior VAEs for short heating/cooling time series."""

from .data import SeriesBatch, load_csv, synthesize_surrogate, split, SplitSpec, fit_normalizer
from .models import (
    ModelConfig,
    build_model,
    generate,
    generate_like,
    gpvae_elbo,
    pigpvae_loss,
    pivae_elbo,
    reconstruct,
    vae_elbo,
)
from .training import TrainConfig, train
from .metrics import evaluate
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
