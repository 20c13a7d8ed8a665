"""Desk-scale 3-D multi-object tracking from point-wise displacement fields."""

__version__ = "0.1.0"
