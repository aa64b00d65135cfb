"""Clip-free INT8 post-training quantization lab for small x3 SR CNNs."""

__version__ = "0.1.0"
