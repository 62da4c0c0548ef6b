"""Spin-Hamiltonian, cavity-transmission and spectral-diffusion models for rare-earth spin ensembles."""

__version__ = "0.1.0"
