"""Dual-head calibrated deep clustering over precomputed feature embeddings."""

__version__ = "0.1.0"
