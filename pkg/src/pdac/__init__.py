"""Density-aware coreset selection for rehearsal-based continual learning."""

__version__ = "0.1.0"
