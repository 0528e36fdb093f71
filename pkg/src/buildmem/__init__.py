"""Quantile-regression memory refinement for large-scale build jobs."""

__version__ = "0.1.0"
