"""Mask-traversal SGD, its competing estimators, and rate analysis tools."""

__version__ = "0.1.0"
