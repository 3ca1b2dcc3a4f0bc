"""Neuron-structure regularizers for domain-generalizable rPPG, with a synthetic test bench."""

__version__ = "0.1.0"
