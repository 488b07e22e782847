"""Animatable body surfaces learned from partial depth point clouds."""

__version__ = "0.1.0"
