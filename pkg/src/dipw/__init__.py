"""Debiased inverse propensity weighting for average treatment effects."""

__version__ = "0.1.0"
