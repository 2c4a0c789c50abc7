"""Modular automated-driving stack with a deterministic closed-loop 2D simulator."""

__version__ = "0.1.0"
