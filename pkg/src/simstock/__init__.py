"""Temporal self-supervised stock representations and their investment applications."""

__version__ = "0.1.0"
