"""Simulator for the synchronous population stability protocol."""

__version__ = "0.1.0"
