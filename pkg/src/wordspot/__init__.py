"""Segmentation-free query-by-string word spotting."""

__version__ = "0.1.0"
