"""Federated recommendation with knowledge guidance: a deterministic simulator."""

__version__ = "0.1.0"
