"""Numerical laboratory for diffeomorphism-valued cocycles over hyperbolic bases."""

__version__ = "0.1.0"
