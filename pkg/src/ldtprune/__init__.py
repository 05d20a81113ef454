"""Location-aware discriminant training and structured channel pruning."""

__version__ = "0.1.0"
