"""Stochastic simulator of quantum-logic rotational spectroscopy of a molecular ion co-trapped with an atomic ion."""

__version__ = "0.1.0"
