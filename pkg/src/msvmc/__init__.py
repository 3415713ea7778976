"""Variational Monte Carlo for several excited states sampled jointly."""

__version__ = "0.1.0"
