"""Sparse activation-map instance segmentation, self-contained on numpy."""

__version__ = "0.1.0"
