"""Semantic neural fields for dynamic scenes learned from point flows."""

__version__ = "0.1.0"
