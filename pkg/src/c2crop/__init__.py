"""Crop-boundary regression with contrastive composition clustering."""

__version__ = "0.1.0"
