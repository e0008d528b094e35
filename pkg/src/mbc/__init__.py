"""Memory-bank compression for continual adaptation of toy language models."""

__version__ = "0.1.0"
