"""Synthetic-gradient transductive meta-learning at desk scale."""

__version__ = "0.1.0"
