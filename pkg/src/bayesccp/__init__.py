"""Bayesian constrained cohort-component estimation of subnational female populations."""

__version__ = "0.1.0"
