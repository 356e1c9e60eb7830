"""Rough paths, rough SDEs and Feynman-Kac Monte Carlo for rough PDEs."""

__version__ = "0.1.0"
