"""Hybrid Boolean + embedding retrieval with a desk-scale two-tower trainer."""
__version__ = "0.1.0"
