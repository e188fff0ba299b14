"""Backdoor forensics toolkit: train, invert, analyze, unlearn."""

__version__ = "0.1.0"
