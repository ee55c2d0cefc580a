"""Pointmap-based structure-from-motion by first-order gradient descent."""

__version__ = "0.1.0"
