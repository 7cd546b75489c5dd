"""Expressive voice conversion with discrete-code prosody modeling and prosody filters."""

__version__ = "0.1.0"
