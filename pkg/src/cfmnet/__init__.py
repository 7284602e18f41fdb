"""Flexible non-blind Gaussian denoising with multi-layer conditional feature modulation."""

__version__ = "0.1.0"
