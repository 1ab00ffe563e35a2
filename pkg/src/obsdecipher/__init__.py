"""Component-grounded oracle bone script decipherment pipeline."""

__version__ = "0.1.0"
