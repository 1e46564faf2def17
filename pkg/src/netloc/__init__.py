"""Joint range and angle-of-arrival localization for UWB node networks."""

__version__ = "0.1.0"
