"""Distributed graph-attention control of a simulated Cosserat-rod soft arm."""

__version__ = "0.1.0"
