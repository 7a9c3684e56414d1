"""Adaptive multilevel-correction finite elements for elliptic eigenvalue problems."""

__version__ = "0.1.0"
