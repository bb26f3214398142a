"""Weak optimal transport with kernel costs: exact costs, discrete solver,
Gaussian oracles and a small maximin neural trainer."""

__version__ = "0.1.0"
