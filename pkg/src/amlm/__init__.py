"""Adaptive masked language modelling with sub-token membership embeddings."""

__version__ = "0.1.0"
