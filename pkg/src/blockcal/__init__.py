"""Calibration of computer-model parameters from spatial data with block composite likelihood."""

__version__ = "0.1.0"
