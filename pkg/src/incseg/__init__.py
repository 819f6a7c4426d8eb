"""Desk-scale class-incremental segmentation laboratory."""

__version__ = "0.1.0"
