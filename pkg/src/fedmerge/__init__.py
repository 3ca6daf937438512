"""Federated learning with a soup of global models merged per client."""

__version__ = "0.1.0"
