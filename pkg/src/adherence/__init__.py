"""Adherence forecasting and intervention allocation for statin patients."""

__version__ = "0.1.0"
