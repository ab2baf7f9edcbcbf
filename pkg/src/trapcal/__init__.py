"""Calibration of surface-trap electrode potentials from ion-string positions and secular frequencies."""

__version__ = "0.1.0"
