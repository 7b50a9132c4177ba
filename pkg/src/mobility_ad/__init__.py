"""Explainable anomaly detection for docked bike-sharing traffic."""

__version__ = "0.1.0"
