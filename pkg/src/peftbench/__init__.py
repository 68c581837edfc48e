"""Micro encoder-decoder transformer with pluggable parameter-efficient fine-tuning."""

__version__ = "0.1.0"
