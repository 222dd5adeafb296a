"""Simulator and verifier for the pinned billiard ball pseudo-velocity model."""
__version__ = "0.1.0"
