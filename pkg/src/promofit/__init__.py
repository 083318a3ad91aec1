"""Conversion-rate prediction under promotion-driven distribution shift."""

__version__ = "0.1.0"
