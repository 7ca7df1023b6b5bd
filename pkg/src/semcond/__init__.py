"""Timestep-aware text-conditioning adapters on a toy diffusion substrate."""

__version__ = "0.1.0"
