"""Shared-encoder multi-task non-autoregressive translation at desk scale."""

__version__ = "0.1.0"
