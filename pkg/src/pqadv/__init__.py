"""Adversarial attacks and defenses for a power-quality disturbance classifier."""

__version__ = "0.1.0"
