"""Multilingual multi-speaker sequence-to-sequence TTS on a unified phone set."""

__version__ = "0.1.0"
