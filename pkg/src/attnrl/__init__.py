"""Attention-based policy cores trained with V-trace on toy grid games."""

__version__ = "0.1.0"
