"""Spectral convex-integration construction kernel for the Boussinesq system
with vertical viscosity on the 3-torus."""

__version__ = "0.1.0"
