"""Correlated latent-space Bayesian optimization over discrete sequences, built on a small numpy autodiff core."""

__version__ = "0.1.0"
