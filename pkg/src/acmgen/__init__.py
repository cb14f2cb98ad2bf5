"""Continual sequence generation with adaptive compositional adapter modules."""

__version__ = "0.1.0"
