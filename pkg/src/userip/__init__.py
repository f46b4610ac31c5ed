"""Latent user-profile inference with soft prompts, quantised profile IDs and a CTR consumer."""

__version__ = "0.1.0"
