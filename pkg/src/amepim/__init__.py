"""Functional simulator of an HBM-PIM pseudo-channel driven by AME matrix instructions."""

__version__ = "0.1.0"
