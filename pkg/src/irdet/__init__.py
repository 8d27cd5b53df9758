"""Desk-scale infrared small-target detector with scan-based global context."""

__version__ = "0.1.0"
