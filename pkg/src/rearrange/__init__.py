"""Planar multi-object pushing: simulator, constrained observations, rewards and learning stack."""

__version__ = "0.1.0"
