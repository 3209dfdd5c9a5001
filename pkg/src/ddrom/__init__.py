"""Data-driven model order reduction with simulation functions and interface maps."""

__version__ = "0.1.0"
