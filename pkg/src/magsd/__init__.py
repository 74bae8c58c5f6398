"""Multiscale attention-guided classification with soft-distance regularization."""

__version__ = "0.1.0"
