"""Bayesian deep learning for discrete choice: models, SGLD sampling and inference."""

__version__ = "0.1.0"
