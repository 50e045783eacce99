"""Adversarial generation of continuous signed distance fields."""

__version__ = "0.1.0"
