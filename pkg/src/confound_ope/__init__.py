"""Bounds on off-policy value estimates under single-decision unobserved confounding."""

__version__ = "0.1.0"
