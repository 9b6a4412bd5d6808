"""Equivariant interatomic potentials with magnitude-modulated adapters."""

__version__ = "0.1.0"
