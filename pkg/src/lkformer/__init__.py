"""Large-kernel transformer for single-image infrared super-resolution."""

__version__ = "0.1.0"
