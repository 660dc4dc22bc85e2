"""Density steering of feedback-linearizable control-affine systems."""

__version__ = "0.1.0"
