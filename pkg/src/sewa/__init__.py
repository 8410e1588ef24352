"""Selective weight averaging over SGD checkpoint windows."""

__version__ = "0.1.0"
