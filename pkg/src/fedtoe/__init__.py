"""Federated learning with transmission outage and quantization error."""

__version__ = "0.1.0"
