"""Delay-oriented power control for energy-harvesting amplify-and-forward relays."""

__version__ = "0.1.0"
