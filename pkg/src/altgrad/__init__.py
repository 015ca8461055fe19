"""Exact and almost-linear-time gradients for multi-layer softmax attention."""

__version__ = "0.1.0"
