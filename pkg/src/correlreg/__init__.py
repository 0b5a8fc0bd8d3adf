"""Multi-modal registration for correlative microscopy images."""

__version__ = "0.1.0"
