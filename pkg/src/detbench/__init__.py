"""Detector evaluation and real-time benchmarking toolkit."""

__version__ = "0.1.0"
