"""Prototype clustering across domains with transport-based assignment."""

__version__ = "0.1.0"
