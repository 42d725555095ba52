"""Hypernetwork-generated PINN solvers for linear 2-D PDEs on the canonical square."""

__version__ = "0.1.0"
