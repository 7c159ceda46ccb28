"""Learned discrete decisions for model predictive control of mixed-logical dynamical systems."""

__version__ = "0.1.0"
