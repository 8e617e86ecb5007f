"""Multiview two-task recursive attention segmentation (LA anatomy + scar)."""

__version__ = "0.1.0"
