"""Multi-agent trajectory prediction with masked scene sequences."""

__version__ = "0.1.0"
