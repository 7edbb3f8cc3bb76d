"""Hypernetwork-generated convex strain-energy models for truss lattices."""

__version__ = "0.1.0"
