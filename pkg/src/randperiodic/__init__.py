"""Random periodic curves of random dynamical systems on the cylinder."""

__version__ = "0.1.0"
