"""Seedable simulator of HTTP adaptive streaming over a small-cell network
with PID-controlled clients and an LP-based scheduler."""

__version__ = "0.1.0"
