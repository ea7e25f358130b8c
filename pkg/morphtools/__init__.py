"""Latent-space face morph generation with identity priors, and its evaluation metrics."""

__version__ = "0.1.0"
