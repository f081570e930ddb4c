"""Learned group actions on an automatically partitioned latent space."""

__version__ = "0.1.0"
