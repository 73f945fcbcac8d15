"""Reference-guided 3D Gaussian-splat scene inpainting with score distillation."""

__version__ = "0.1.0"
