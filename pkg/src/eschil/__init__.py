"""Event-synchronized co-simulation of switched power-electronics circuits."""

__version__ = "0.1.0"
