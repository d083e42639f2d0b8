"""Robust natural actor-critic on tabular robust MDPs."""

__version__ = "0.1.0"
