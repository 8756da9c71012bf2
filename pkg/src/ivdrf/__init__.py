"""Instrumental-variable estimation of dose-response functions."""

__version__ = "0.1.0"
