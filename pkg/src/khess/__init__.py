"""Finite-difference solver for sigma_k(D^2 u) = f and tools for checking
interior second-derivative estimates on its solutions."""

__version__ = "0.1.0"
