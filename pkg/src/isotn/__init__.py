"""Riemannian optimization of isometric tensor networks."""

__version__ = "0.1.0"
