"""Wildfire smoke plume segmentation and fixed-effects validation toolkit."""

__version__ = "0.1.0"
