"""Mine behavioral specifications of opaque shell commands."""

__version__ = "0.1.0"
