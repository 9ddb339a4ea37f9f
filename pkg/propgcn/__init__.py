"""Proposal graph convolution for temporal action localization."""

__version__ = "0.1.0"
