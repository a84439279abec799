"""Adversarially trained non-autoregressive multi-speaker mel synthesis."""

__version__ = "0.1.0"
