"""Learned compression of single-channel solar EUV images."""

__version__ = "0.1.0"
