"""Personalized federated GP classification with a shared deep kernel."""

__version__ = "0.1.0"
