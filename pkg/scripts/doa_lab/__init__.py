"""Noise-trained multi-speaker DOA estimation lab."""

__version__ = "0.1.0"
