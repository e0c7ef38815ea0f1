"""Temporal invariant training for drift-robust binary detectors."""

__version__ = "0.1.0"
