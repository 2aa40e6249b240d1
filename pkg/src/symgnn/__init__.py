"""Sylvester-equation multi-network mining and its neural generalization."""

__version__ = "0.1.0"
