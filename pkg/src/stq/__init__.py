"""Quantization-aware training with an adaptive binary/ternary regularizer."""

__version__ = "0.1.0"
