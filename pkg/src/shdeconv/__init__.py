"""Spatio-hemispherical equivariant graph convolutions for fODF deconvolution."""

__version__ = "0.1.0"
