"""Desk-scale clean-label backdoor pipeline for a toy vision-language setting."""

__version__ = "0.1.0"
