"""Synchronous text-acoustic tokenization and single-stream speech-text
modeling, trained and evaluated on a synthetic corpus with oracle ground
truth."""

__version__ = "0.1.0"
