"""Latency-budgeted adaptive inference for a small reconfigurable transformer."""

__version__ = "0.1.0"
