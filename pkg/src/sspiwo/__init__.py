"""Semi-supervised variational objectives with partial importance weighting."""

__version__ = "0.1.0"
