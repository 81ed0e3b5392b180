"""Cascaded face super-resolution with alternating dense-correspondence refinement."""

__version__ = "0.1.0"
