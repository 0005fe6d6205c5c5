"""Fictitious-domain fluid-structure interaction solver in two dimensions."""

__version__ = "0.1.0"
