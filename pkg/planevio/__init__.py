"""Plane-regularized sliding-window direct visual-inertial odometry."""

__version__ = "0.1.0"
