"""Stochastic differential equations as fields of 2-jets."""

__version__ = "0.1.0"
