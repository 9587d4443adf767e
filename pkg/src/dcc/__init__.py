"""Decentralized constraint coordination for multi-agent task offloading."""

__version__ = "0.1.0"
