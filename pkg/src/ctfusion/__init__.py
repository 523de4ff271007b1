"""Continuous-time visual-inertial-ranging fusion on cubic B-spline trajectories."""

__version__ = "0.1.0"
