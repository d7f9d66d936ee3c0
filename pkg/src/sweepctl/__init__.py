"""Penalized sweeping-process integration, catching-up oracle, and
maximum-principle certification."""

__version__ = "0.1.0"
