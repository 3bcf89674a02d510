"""Federated learning with gradient- and reconstruction-based anomaly screening."""

__version__ = "0.1.0"
