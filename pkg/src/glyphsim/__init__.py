"""Glyph and writing-system similarity learning toolkit."""

__version__ = "0.1.0"
