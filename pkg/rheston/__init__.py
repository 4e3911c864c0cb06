"""Simulation and pricing for Markovian approximations of the rough Heston model."""

__version__ = "0.1.0"
