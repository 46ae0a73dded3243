"""Crossover Process toolkit: noise-free, learnability-preserving shuffles of training data."""

__version__ = "0.1.0"
