"""Unsupervised infection segmentation via Fourier style transfer and a mean-teacher network."""

__version__ = "0.1.0"
