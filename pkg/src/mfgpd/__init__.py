"""Primal-dual solver for time-dependent second-order mean field games on the 2-torus."""

__version__ = "0.1.0"
