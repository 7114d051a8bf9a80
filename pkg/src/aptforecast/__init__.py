"""Timestamp-conditioned prototype affine modulation for time-series forecasting."""

__version__ = "0.1.0"
