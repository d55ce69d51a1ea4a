"""Desk-scale transformer U-Net segmentation toolkit."""

__version__ = "0.1.0"
