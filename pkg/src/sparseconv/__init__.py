"""Sparsity-invariant convolution layers and the DVMN depth-completion network."""

__version__ = "0.1.0"
