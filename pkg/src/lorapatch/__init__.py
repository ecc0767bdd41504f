"""Gated low-rank conv patches for image-to-image generators, with the attacks, metrics and file formats around them."""

__version__ = "0.1.0"
