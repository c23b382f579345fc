"""Edge-guided conditional diffusion for thermal image generation."""

__version__ = "0.1.0"
