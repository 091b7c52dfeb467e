"""Deterministic simulator for a dual-bus secure CAN-FD architecture."""

__version__ = "0.1.0"
