"""Discrete-code alignment of collaborative and textual disease embeddings for rare-disease prediction."""

__version__ = "0.1.0"
