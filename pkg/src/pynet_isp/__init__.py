"""Learned RAW-to-RGB camera pipeline built around the PyNET pyramid."""

__version__ = "0.1.0"
