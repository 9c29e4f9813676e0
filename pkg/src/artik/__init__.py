"""Articulated mechanism reconstruction from observed pose trajectories."""

__version__ = "0.1.0"
