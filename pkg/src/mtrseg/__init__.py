"""Mask-then-recognize continual semantic segmentation on a synthetic shapes corpus."""

__version__ = "0.1.0"
