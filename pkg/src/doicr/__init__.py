"""Directly optimized inductive conformal regression and its baselines."""

__version__ = "0.1.0"
