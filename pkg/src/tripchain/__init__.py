"""Reconstruct driver work sessions from anonymized ride-hail trips and report on earnings."""

__version__ = "0.1.0"
