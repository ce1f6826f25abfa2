"""Causal imitation learning under state measurement error."""
__version__ = "0.1.0"
