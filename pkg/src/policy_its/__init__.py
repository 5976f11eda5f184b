"""Bayesian hierarchical interrupted-time-series engine for staggered policy rollouts."""

__version__ = "0.1.0"
