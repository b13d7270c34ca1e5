"""Desk-scale clinical task orchestration and analytics platform."""

__version__ = "0.1.0"
