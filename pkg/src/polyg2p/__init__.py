"""Polyphone disambiguation G2P engine."""

__version__ = "0.1.0"
