"""2D-mask consolidation into a per-particle labeling, 3D-consistent mask
re-rendering, and outpainting mask generation."""

from __future__ import annotations

import numpy as np

from .rasterizer import ContributionTally, RasterSettings, render
from .scene import CameraView, GaussianScene, InvalidInputError, Label


def label_gaussians(tally: ContributionTally, tau_mask: float = 1.0) -> np.ndarray:
    """Per-particle labels from masked/unmasked contribution counts.

    Masked iff masked_count >= tau_mask * unmasked_count; a particle with zero
    unmasked contributions is Masked iff it contributed to any masked pixel.
    Ties are Masked.
    """
    if tau_mask < 0:
        raise InvalidInputError("tau_mask must be nonnegative")
    mc = tally.masked_count.astype(float)
    uc = tally.unmasked_count.astype(float)
    masked = np.where(uc > 0, mc >= tau_mask * uc, mc > 0)
    return np.where(masked, Label.MASKED, Label.UNMASKED).astype(np.uint8)


def render_consistent_masks(
    scene: GaussianScene,
    views: list[CameraView],
    tau_prime: float = 0.3,
    settings: RasterSettings | None = None,
) -> list[np.ndarray]:
    """Rasterize particle labels back to the views and threshold the rendered
    semantic channel, yielding 3D-consistent binary masks."""
    if not 0.0 <= tau_prime <= 1.0:
        raise InvalidInputError("tau_prime must lie in [0, 1]")
    masks = []
    for view in views:
        out = render(scene, view, settings)
        masks.append((out.semantic >= tau_prime).astype(np.uint8))
    return masks


def generate_outpaint_masks(
    views: list[CameraView],
    sphere_distance: float,
    sphere_radius: float,
) -> list[np.ndarray]:
    """Inverse masks for outpainting: a sphere sits at ``sphere_distance``
    along each view's optical axis; pixels whose rays miss it are the region
    to synthesize (mask 1)."""
    if not (sphere_distance > sphere_radius > 0):
        raise InvalidInputError("require sphere_distance > sphere_radius > 0")
    masks = []
    for view in views:
        xs = (np.arange(view.width) + 0.5 - view.cx) / view.fx
        ys = (np.arange(view.height) + 0.5 - view.cy) / view.fy
        X, Y = np.meshgrid(xs, ys)
        # camera-space ray (X, Y, 1) vs sphere at (0, 0, sphere_distance):
        # |o + t d - c|^2 = r^2 has a solution iff the discriminant >= 0
        dd = X * X + Y * Y + 1.0
        dc = sphere_distance  # d . c with d=(X,Y,1), c=(0,0,dist) -> dist
        disc = dc * dc - dd * (sphere_distance**2 - sphere_radius**2)
        masks.append((disc < 0).astype(np.uint8))
    return masks
