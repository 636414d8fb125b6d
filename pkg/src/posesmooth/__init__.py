"""Offline bi-directional learned Kalman smoothing of per-frame vehicle poses."""

__version__ = "0.1.0"
