"""Desk-scale clinical text-image alignment laboratory."""

__version__ = "0.1.0"
