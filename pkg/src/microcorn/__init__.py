"""Desk-scale commented retrieval over a frozen toy language model."""
__version__ = "0.1.0"
