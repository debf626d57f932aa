"""Permission-aware retrieval over an access-controlled record store."""

__version__ = "0.1.0"
