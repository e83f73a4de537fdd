"""Radar multi-path ghost simulation, instance detection and evaluation."""

__version__ = "0.1.0"
