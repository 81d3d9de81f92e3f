"""Planar finger/disk manipulation: contact-mode trajectory optimization
guided by a learned value-function ensemble."""

__version__ = "0.1.0"
