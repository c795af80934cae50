"""Conditional diffusion data augmentation for speech emotion recognition."""

__version__ = "0.1.0"

EMOTIONS = ("angry", "happy", "neutral", "sad")
