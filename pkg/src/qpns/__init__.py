"""Quasi-periodic solutions of forced 2D Euler and Navier-Stokes on the torus."""

__version__ = "0.1.0"
