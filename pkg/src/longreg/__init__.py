"""Longitudinal deformable registration with weak supervision and pair-type-aware sampling."""

__version__ = "0.1.0"
