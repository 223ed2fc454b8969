"""Generative object-location model on synthetic scenes."""

__version__ = "0.1.0"
