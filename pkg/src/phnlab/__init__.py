"""Simulation toolkit for the M/Ph/n+M many-server diffusion and its Euler-Maruyama approximation."""

__version__ = "0.1.0"
