"""Base-station hourly energy estimation."""

__version__ = "0.1.0"
