"""Structural estimation of risk, loss and time preferences from price-list choices."""

__version__ = "0.1.0"
