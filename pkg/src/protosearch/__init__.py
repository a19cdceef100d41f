"""Evolutionary search over scene-text-recognition training protocols."""

__version__ = "0.1.0"
