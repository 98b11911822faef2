"""Dual VQ-VAE spatio-temporal latent factor model with portfolio and trading harnesses."""

from .config import LossWeights, StormConfig, TrainConfig
from .model import Storm

__all__ = ["LossWeights", "Storm", "StormConfig", "TrainConfig"]
__version__ = "0.1.0"
