"""Memory-based parameter adaptation (MbPA)."""

__version__ = "0.1.0"
