"""Estimation of sublinearly sparse discrete signals in Gaussian noise."""

__version__ = "0.1.0"
