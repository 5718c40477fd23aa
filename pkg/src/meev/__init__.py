"""Multi-scale body mesh estimation from person crops."""

__version__ = "0.1.0"
