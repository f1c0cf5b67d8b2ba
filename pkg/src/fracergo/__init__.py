"""Coupling experiments for SDEs driven by moving-average Gaussian noise."""

__version__ = "0.1.0"
