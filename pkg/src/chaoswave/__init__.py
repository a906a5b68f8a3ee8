"""Chaos-expansion numerics for the 1-D wave equation driven by Gaussian noise
that is fractional in time and Riesz-correlated in space."""

__version__ = "0.1.0"
