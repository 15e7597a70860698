"""Extractive question answering with linguistic-feature fusion."""

__version__ = "0.1.0"
