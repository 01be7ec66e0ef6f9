"""Sparse-autoencoder interpretability for a small quantized-token time-series forecaster."""

__version__ = "0.1.0"
