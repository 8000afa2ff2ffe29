"""Opioid use disorder risk prediction from EHR encounter histories."""

__version__ = "0.1.0"
