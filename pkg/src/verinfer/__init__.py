"""Verifiable inference via secret-conditioned proxy tasks on hidden states."""

__version__ = "0.1.0"
