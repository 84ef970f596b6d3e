"""Iterative GP-compensated MPC with active exploration for racing."""

__version__ = "0.1.0"
