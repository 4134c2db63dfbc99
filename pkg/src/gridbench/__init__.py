"""Contingency screening and surrogate benchmarking for AC power flow."""

__version__ = "0.1.0"
