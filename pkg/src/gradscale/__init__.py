"""Gradient scale coefficient analysis for deep MLPs and ResNets."""

__version__ = "0.1.0"
