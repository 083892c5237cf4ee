"""Compositional concept inversion for a desk-scale text-to-image diffusion model."""

__version__ = "0.1.0"
