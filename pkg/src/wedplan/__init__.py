"""Synthetic WED profile prediction, streaming refinement and scan positioning."""

__version__ = "0.1.0"
