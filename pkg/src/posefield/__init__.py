"""Pose-conditioned customization of a toy pixel diffusion model with in-layer feature radiance fields."""

__version__ = "0.1.0"
