"""Pilot-point ensemble Kalman filtering for groundwater parameter estimation."""
__version__ = "0.1.0"
