"""Mixture-of-experts interatomic potential with a simulated hybrid-parallel runtime."""

__version__ = "0.1.0"
