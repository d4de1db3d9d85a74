"""Classifier training under rate constraints via Lagrangian and proxy-Lagrangian games."""

__version__ = "0.1.0"
