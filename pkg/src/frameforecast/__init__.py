"""Instruction-conditioned future-frame prediction with a small latent diffusion model."""

__version__ = "0.1.0"
