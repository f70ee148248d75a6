"""Adaptive patch-word alignment with cyclic image/report generation."""

__version__ = "0.1.0"
