"""Anomaly detection and root-cause path ranking for microservice traces."""

__version__ = "0.1.0"
