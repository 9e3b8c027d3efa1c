"""Learned multi-view local descriptors for 3D surface points."""

__version__ = "0.1.0"
