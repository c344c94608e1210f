"""Backward compatibility of feature-attribution explanations across model updates."""

__version__ = "0.1.0"
