"""Adversarial backward-compatible training for embedding models, at desk scale."""

__version__ = "0.1.0"
