"""Symbolic gradient-norm and partial-sensitivity analysis with Renyi-DP accounting."""

__version__ = "0.1.0"
