"""Hierarchical contrastive learning, heterogeneous graph attention and
multi-granularity sparse attention for patent phrase similarity."""

__version__ = "0.1.0"
