"""Federated learning simulator with fairness-aware aggregation."""

__version__ = "0.1.0"
