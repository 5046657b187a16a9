"""mixlab: Markovian reduction and exponential mixing of random dynamical systems."""

__version__ = "0.1.0"
