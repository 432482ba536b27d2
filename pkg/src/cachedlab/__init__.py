"""Chunked encoding with gradient caching for long-input encoder-decoder training."""

__version__ = "0.1.0"
