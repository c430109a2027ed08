"""Constrained learn-to-defer post-processing."""
__version__ = "0.1.0"
