"""Desk-scale text-image alignment with bidirectional attention weighting,
masked phrase modeling, and coarse-to-fine retrieval."""

__version__ = "0.1.0"
