"""Identification-robust conditional moment tests for smooth-transition regressions."""
__version__ = "0.1.0"
