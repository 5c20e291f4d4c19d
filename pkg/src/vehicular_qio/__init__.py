"""Quantum-inspired vehicular network optimization."""

__version__ = "0.1.0"
