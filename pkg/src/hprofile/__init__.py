"""Hospital outcomes profiling toolkit."""

__version__ = "0.1.0"
