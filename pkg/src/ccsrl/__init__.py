"""Closed-loop CO2-storage control: proxy reservoir, model-free SAC regimes and latent model-based adaptation."""

__version__ = "0.1.0"
