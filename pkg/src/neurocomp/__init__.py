"""Event-driven (delta-modulation + address-event) compression of neural recordings."""

__version__ = "0.1.0"
