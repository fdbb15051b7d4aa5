"""Disentangled alignment of a collaborative-filtering backbone with a frozen text-embedding modality."""

__version__ = "0.1.0"
