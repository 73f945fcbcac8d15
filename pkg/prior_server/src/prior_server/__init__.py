"""HTTP service hosting a latent inpainting diffusion prior with
single-image adapter personalization."""

__version__ = "0.1.0"
