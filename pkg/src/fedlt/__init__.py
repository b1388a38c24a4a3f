"""Federated long-tailed learning simulator with classifier re-balancing."""

__version__ = "0.1.0"
