"""Survival analysis with a variational autoencoder over censored time-to-event data."""

__version__ = "0.1.0"
