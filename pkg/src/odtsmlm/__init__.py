"""Scattering-aware simulation and joint reconstruction for single-molecule fluorescence frames."""

__version__ = "0.1.0"
