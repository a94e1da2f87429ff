"""Comprehensive information bottleneck attribution for small Vision Transformers."""

__version__ = "0.1.0"
