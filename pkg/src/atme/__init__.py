"""Adversarial image-to-image translation with entropy-attending input corruption."""

__version__ = "0.1.0"
