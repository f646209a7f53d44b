"""Egocentric grid memory mapping and cross-modal action reasoning."""

__version__ = "0.1.0"
