"""Spot-guided sparse attention feature matching in plain numpy."""

__version__ = "0.1.0"
