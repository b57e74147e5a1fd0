"""Iterative fusion recognizer for low-quality scene text."""

__version__ = "0.1.0"
