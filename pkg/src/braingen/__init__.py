"""Synthetic brain-to-text generation benchmark: a frozen toy language model
steered by a trainable brain adapter, evaluated against permutation controls."""

__version__ = "0.1.0"
