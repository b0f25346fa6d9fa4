"""Data-driven compositional barrier certificates for networks of polynomial subsystems."""

__version__ = "0.1.0"
