"""Spatio-temporal signed distance auto-decoder for evolving 3D shapes."""

__version__ = "0.1.0"
