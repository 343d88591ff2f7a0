"""Part-based articulated object reconstruction from sparse multi-state images."""

__version__ = "0.1.0"
