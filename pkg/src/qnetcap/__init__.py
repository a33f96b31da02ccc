"""Numerical toolkit for fidelity bounds and encoding reductions in quantum networks."""

__version__ = "0.1.0"
