"""Trajectory-tree synthesis and robustness evaluation for GUI-style agents."""

__version__ = "0.1.0"
