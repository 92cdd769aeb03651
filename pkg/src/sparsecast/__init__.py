"""Sparse-event forecasting from dense wearable sensor streams plus known-future context."""

__version__ = "0.1.0"
