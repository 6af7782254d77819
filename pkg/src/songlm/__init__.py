"""Desk-scale dual-track song token modeling."""

__version__ = "0.1.0"
