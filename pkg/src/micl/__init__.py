"""Desk-scale laboratory for in-context learning of finite Markov-chain ensembles."""

__version__ = "0.1.0"
