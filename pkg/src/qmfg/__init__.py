"""Quantile-coupled mean-field dynamics with common noise and jumps."""

__version__ = "0.1.0"
