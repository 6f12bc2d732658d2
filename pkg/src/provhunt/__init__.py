"""Streaming provenance-based APT detection."""

__version__ = "0.1.0"
