"""Group-robust classification over frozen, precomputed embeddings."""

__version__ = "0.1.0"
