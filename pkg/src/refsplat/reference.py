"""Reference-guided initialization: depth alignment, edge-aware refinement,
and unprojection of reference pixels into new masked particles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import (
    CameraView,
    GaussianScene,
    InvalidInputError,
    Label,
    concat_scenes,
    logit,
    rgb_to_dc,
)


@dataclass
class DepthAlignment:
    scale: float
    offset: float
    aligned_depth: np.ndarray  # scale * relative + offset, elementwise
    degenerate: bool = False  # fallback used (constant relative depth)


@dataclass
class ReferenceView:
    camera: CameraView
    image: np.ndarray  # (h, w, 3)
    mask: np.ndarray  # (h, w) binary, 1 = inpainted region
    relative_depth: np.ndarray  # (h, w), unitless

    def __post_init__(self):
        shapes = {self.image.shape[:2], self.mask.shape, self.relative_depth.shape}
        if len(shapes) != 1:
            raise InvalidInputError("reference planes must share dimensions")


def align_depth(relative: np.ndarray, rendered: np.ndarray, unmasked: np.ndarray) -> DepthAlignment:
    """Least-squares scale/offset aligning a relative depth map to rendered
    depth over the unmasked pixel set (boolean array)."""
    unmasked = np.asarray(unmasked, dtype=bool)
    if unmasked.sum() < 2:
        raise InvalidInputError("need at least two unmasked pixels")
    dt = relative[unmasked].astype(float)
    dh = rendered[unmasked].astype(float)
    n = dt.size
    var = np.sum((dt - dt.mean()) ** 2)
    if var < 1e-12 * max(1.0, np.sum(dt**2)):
        s, o = 1.0, float(np.mean(dh - dt))
        return DepthAlignment(s, o, s * relative + o, degenerate=True)
    A = np.array([[np.sum(dt * dt), np.sum(dt)], [np.sum(dt), float(n)]])
    b = np.array([np.sum(dt * dh), np.sum(dh)])
    s, o = np.linalg.solve(A, b)
    return DepthAlignment(float(s), float(o), s * relative + o)


def bilateral_refine(
    depth: np.ndarray,
    guide: np.ndarray,
    mask: np.ndarray,
    sigma_color: float = 0.1,
    sigma_space: float = 2.0,
    iterations: int = 10,
    radius: int = 2,
) -> np.ndarray:
    """Iterative joint-bilateral smoothing of ``depth`` guided by ``guide``.

    Each masked pixel is replaced by the weighted average of its
    (2*radius+1)^2 neighborhood; unmasked pixels are boundary conditions.
    """
    if guide.shape[:2] != depth.shape:
        raise InvalidInputError("guide and depth shapes must match")
    mask = np.asarray(mask, dtype=bool)
    H, W = depth.shape
    out = depth.astype(float).copy()
    offsets = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    sw = {
        (dy, dx): np.exp(-(dy * dy + dx * dx) / (2.0 * sigma_space**2))
        for dy, dx in offsets
    }
    for _ in range(iterations):
        num = np.zeros((H, W))
        den = np.zeros((H, W))
        for dy, dx in offsets:
            ys = slice(max(0, dy), H + min(0, dy))
            xs = slice(max(0, dx), W + min(0, dx))
            ys_n = slice(max(0, -dy), H + min(0, -dy))
            xs_n = slice(max(0, -dx), W + min(0, -dx))
            dg = guide[ys, xs] - guide[ys_n, xs_n]
            wc = np.exp(-np.sum(dg * dg, axis=-1) / (2.0 * sigma_color**2))
            w = sw[(dy, dx)] * wc
            num[ys, xs] += w * out[ys_n, xs_n]
            den[ys, xs] += w
        smoothed = num / den
        out[mask] = smoothed[mask]
    return out


@dataclass
class UnprojectResult:
    particles: GaussianScene  # all labeled Masked
    skipped: int  # masked pixels dropped for nonpositive aligned depth


def unproject_reference(
    ref: ReferenceView,
    alignment: DepthAlignment,
    stride: int = 1,
    opacity: float = 0.8,
    footprint_gain: float = 0.7,
) -> UnprojectResult:
    """One masked particle per (strided) masked reference pixel, placed at the
    aligned depth along the pixel ray, with the pixel color as DC."""
    cam = ref.camera
    H, W = ref.mask.shape
    ys, xs = np.nonzero(ref.mask[::stride, ::stride])
    ys = ys * stride
    xs = xs * stride
    z = alignment.aligned_depth[ys, xs]
    good = z > 0
    skipped = int(np.sum(~good))
    ys, xs, z = ys[good], xs[good], z[good]
    px = xs + 0.5
    py = ys + 0.5
    p_cam = np.stack(
        [(px - cam.cx) / cam.fx * z, (py - cam.cy) / cam.fy * z, z], axis=-1
    )
    R, t = cam.rotation, cam.translation
    positions = (p_cam - t) @ R  # R^T (p_cam - t) row-wise
    n = positions.shape[0]
    colors = ref.image[ys, xs]
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = rgb_to_dc(colors)
    scale = footprint_gain * stride * z / cam.fx
    chunk = GaussianScene(
        positions=positions,
        log_scales=np.log(np.maximum(scale, 1e-8))[:, None].repeat(3, axis=1),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, float(logit(opacity))),
        sh_coeffs=sh,
        labels=np.full(n, int(Label.MASKED), dtype=np.uint8),
    )
    return UnprojectResult(chunk, skipped)


def init_masked_region(
    scene: GaussianScene,
    labels: np.ndarray,
    ref: ReferenceView,
    alignment: DepthAlignment,
    stride: int = 1,
) -> GaussianScene:
    """Delete all Masked particles and append the reference unprojection.
    Unmasked particles are untouched."""
    scene = scene.copy()
    scene.labels = np.asarray(labels, dtype=np.uint8)
    kept = scene.subset(np.flatnonzero(scene.labels == Label.UNMASKED))
    new = unproject_reference(ref, alignment, stride=stride).particles
    new.background_color = scene.background_color.copy()
    return concat_scenes(kept, new)
