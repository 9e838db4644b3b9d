"""Behavior-aware fleet dispatching on hexagonal multiview grids."""

__version__ = "0.1.0"
