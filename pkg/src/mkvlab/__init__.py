"""Particle simulation and verification tools for mean-field control with common noise."""

__version__ = "0.1.0"
