"""Recursive neural networks over jet clustering trees."""

__version__ = "0.1.0"
