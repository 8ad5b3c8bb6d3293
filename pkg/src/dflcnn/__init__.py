"""Two-stage vehicle detector with double focal loss and skip-connected features."""

__version__ = "0.1.0"
