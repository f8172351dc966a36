"""Adapter from image folders plus a classification model to the binary
feature-store format consumed by the scoring toolkit."""

__version__ = "0.1.0"

from .extract import ExtractionSpec, extract, load_model  # noqa: F401
