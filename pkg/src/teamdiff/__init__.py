"""Discrete-diffusion ego policies for ad hoc teamwork on grid worlds."""

__version__ = "0.1.0"
