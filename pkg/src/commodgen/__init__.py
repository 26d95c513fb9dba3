"""Synthetic commodity price paths: generators, scoring metrics, deep hedging."""

__version__ = "0.1.0"
