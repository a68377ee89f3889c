"""Latent-domain discovery and OOD detection/generalization for windowed time series."""

__version__ = "0.1.0"
