"""Calibrated inference under distributional uncertainty."""

__version__ = "0.1.0"
