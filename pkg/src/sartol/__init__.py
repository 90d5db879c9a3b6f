"""Spatially tolerant road segmentation on synthetic SAR scenes."""

__version__ = "0.1.0"
