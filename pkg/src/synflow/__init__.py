"""Reaction-template GFlowNet engine for synthesizable molecule generation."""

__version__ = "0.1.0"
