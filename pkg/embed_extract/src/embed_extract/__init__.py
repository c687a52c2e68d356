"""Offline embedding extraction: title/abstract JSON-lines -> PUE1 corpus."""

from .extract import DEFAULT_ENCODER, Encoder, ExtractError, RawDoc, extract, read_raw_docs

__all__ = [
    "DEFAULT_ENCODER",
    "Encoder",
    "ExtractError",
    "RawDoc",
    "extract",
    "read_raw_docs",
]

__version__ = "0.1.0"
