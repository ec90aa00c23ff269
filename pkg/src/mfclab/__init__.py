"""Numerical laboratory for nonconvex mean-field optimal control."""

__version__ = "0.1.0"
