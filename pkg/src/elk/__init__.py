"""Bayesian multiresolution lattice kriging with sparse GMRF precisions."""

__version__ = "0.1.0"
