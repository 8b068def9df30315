"""Compactor-based distillation with retrieval-guided gradient resetting and lossless slimming."""

__version__ = "0.1.0"
