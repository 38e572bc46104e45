"""Kernel learning by minimising the relative loss of interpolating from a random half of the data."""
__version__ = "0.1.0"
