"""Turnstile full-counting-statistics simulator for one-dimensional qubit circuits."""

__version__ = "0.1.0"
