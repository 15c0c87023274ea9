"""Exact beliefs, latent POMDP models and value-difference bound checks."""

__version__ = "0.1.0"
