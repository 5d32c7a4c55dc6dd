"""Bayesian optimization over finite molecular candidate pools."""

__version__ = "0.1.0"
