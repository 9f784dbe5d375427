"""CLI, configuration, streaming loop, benchmarking and evaluation metrics."""

from kpmotion.runtime.cli import main

__all__ = ["main"]
