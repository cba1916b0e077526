"""Latent-space masked prediction pretraining and evaluation for multi-lead ECG."""

__version__ = "0.1.0"
