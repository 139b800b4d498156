"""Adaptive finite-element Kohn-Sham ground states by a linearized gradient flow."""

__version__ = "0.1.0"
