"""Command-line surface: ingestion, statistics, training, scoring, benchmarks."""

from .main import main

__all__ = ["main"]
