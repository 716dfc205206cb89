"""Grounded latent-tree chart model with a self-contained autodiff engine."""

__version__ = "0.1.0"
