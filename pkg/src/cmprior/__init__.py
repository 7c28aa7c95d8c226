"""Compressed map priors: binarized multi-resolution hash embeddings of 2D space."""

__version__ = "0.1.0"
