"""Cycle-approximate simulator of a vector processor with a multi-precision tensor unit."""

__version__ = "0.1.0"
