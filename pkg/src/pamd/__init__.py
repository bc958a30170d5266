"""Plausibility-aware music-to-dance diffusion in plain numpy."""

__version__ = "0.1.0"
