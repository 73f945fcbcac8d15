"""Gaussian-splat scene representation and closed-form geometry/appearance primitives.

The scene is stored as a struct-of-arrays for vectorized rendering; a
:class:`GaussianParticle` view is available for single-particle work.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

# real spherical harmonics constants, degree <= 3 (splatting convention)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

SH_COEFFS = 16  # basis functions per color channel
SH_DIM = 3 * SH_COEFFS
DC_OFFSET = 0.5  # added to the SH reconstruction before clamping at zero


class Label(IntEnum):
    UNMASKED = 0
    MASKED = 1


class InvalidInputError(ValueError):
    """Raised when an operation receives input violating its preconditions."""


@dataclass
class GaussianParticle:
    """A single splat: position, log-scale, unit quaternion (w,x,y,z),
    opacity logit, 48 SH coefficients (16 per channel), and a mask label."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray
    label: Label = Label.UNMASKED


@dataclass
class GaussianScene:
    """Ordered particle set, stored column-wise.

    ``sh_coeffs`` is laid out ``(n, 3, 16)``: channel-major per particle, so
    flattening matches the on-disk order f_dc_0..2, f_rest_0..44 after the
    usual DC/rest split.
    """

    positions: np.ndarray  # (n, 3)
    log_scales: np.ndarray  # (n, 3)
    rotations: np.ndarray  # (n, 4), (w, x, y, z)
    opacity_logits: np.ndarray  # (n,)
    sh_coeffs: np.ndarray  # (n, 3, 16)
    labels: np.ndarray  # (n,) uint8
    background_color: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == Label.MASKED)

    @property
    def unmasked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == Label.UNMASKED)

    def particle(self, i: int) -> GaussianParticle:
        return GaussianParticle(
            position=self.positions[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh_coeffs[i].copy(),
            label=Label(int(self.labels[i])),
        )

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            labels=self.labels.copy(),
            background_color=self.background_color.copy(),
        )

    def subset(self, idx: np.ndarray) -> "GaussianScene":
        return GaussianScene(
            positions=self.positions[idx].copy(),
            log_scales=self.log_scales[idx].copy(),
            rotations=self.rotations[idx].copy(),
            opacity_logits=self.opacity_logits[idx].copy(),
            sh_coeffs=self.sh_coeffs[idx].copy(),
            labels=self.labels[idx].copy(),
            background_color=self.background_color.copy(),
        )

    @staticmethod
    def empty(background_color=(0.0, 0.0, 0.0)) -> "GaussianScene":
        return GaussianScene(
            positions=np.zeros((0, 3)),
            log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            opacity_logits=np.zeros(0),
            sh_coeffs=np.zeros((0, 3, SH_COEFFS)),
            labels=np.zeros(0, dtype=np.uint8),
            background_color=np.asarray(background_color, dtype=float),
        )

    @staticmethod
    def from_particles(particles, background_color=(0.0, 0.0, 0.0)) -> "GaussianScene":
        n = len(particles)
        scene = GaussianScene.empty(background_color)
        if n == 0:
            return scene
        scene.positions = np.stack([p.position for p in particles]).astype(float)
        scene.log_scales = np.stack([p.log_scale for p in particles]).astype(float)
        scene.rotations = np.stack([p.rotation for p in particles]).astype(float)
        scene.opacity_logits = np.array([p.opacity_logit for p in particles], dtype=float)
        scene.sh_coeffs = np.stack([np.asarray(p.sh_coeffs, dtype=float).reshape(3, SH_COEFFS) for p in particles])
        scene.labels = np.array([int(p.label) for p in particles], dtype=np.uint8)
        return scene


def concat_scenes(a: GaussianScene, b: GaussianScene) -> GaussianScene:
    return GaussianScene(
        positions=np.concatenate([a.positions, b.positions]),
        log_scales=np.concatenate([a.log_scales, b.log_scales]),
        rotations=np.concatenate([a.rotations, b.rotations]),
        opacity_logits=np.concatenate([a.opacity_logits, b.opacity_logits]),
        sh_coeffs=np.concatenate([a.sh_coeffs, b.sh_coeffs]),
        labels=np.concatenate([a.labels, b.labels]),
        background_color=a.background_color.copy(),
    )


@dataclass
class CameraView:
    """Pinhole camera with an optional training image and inpainting mask."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # (4, 4)
    image: np.ndarray | None = None  # (h, w, 3) in [0, 1]
    mask: np.ndarray | None = None  # (h, w) binary, 1 = to inpaint
    view_id: int = -1

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=float)
        R = self.world_to_camera[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-4):
            raise InvalidInputError("world_to_camera rotation block is not orthonormal")
        if self.image is not None and self.mask is not None:
            if self.mask.shape[:2] != self.image.shape[:2]:
                raise InvalidInputError("mask dimensions must equal image dimensions")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def ray_direction(self, px: float, py: float) -> np.ndarray:
        """World-space unit direction through pixel center (px, py)."""
        d_cam = np.array([(px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0])
        d = self.rotation.T @ d_cam
        return d / np.linalg.norm(d)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of quaternion(s) (w,x,y,z), normalized internally.

    Accepts (4,) or (n, 4); returns (3, 3) or (n, 3, 3).
    """
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise InvalidInputError("zero-norm quaternion")
    w, x, y, z = (q / norm).T
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quat_scale_to_cov(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """3x3 covariance R diag(exp(2 s)) R^T from a quaternion and log-scales.

    Vectorized over a leading batch dimension. Raises on zero-norm quaternions.
    """
    R = quat_to_rotmat(rotation)
    s = np.exp(np.asarray(log_scale, dtype=float))
    # built as L L^T (L = R diag(s)) so the result is bitwise symmetric
    if R.ndim == 2:
        L = R * s[None, :]
        return np.einsum("ij,kj->ik", L, L)
    L = R * s[:, None, :]
    return np.einsum("nij,nkj->nik", L, L)


def sh_basis(view_dir: np.ndarray) -> np.ndarray:
    """The 16 real SH basis values at unit direction(s).

    view_dir: (..., 3) -> (..., 16).
    """
    v = np.asarray(view_dir, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    b = np.empty(v.shape[:-1] + (SH_COEFFS,))
    b[..., 0] = SH_C0
    b[..., 1] = -SH_C1 * y
    b[..., 2] = SH_C1 * z
    b[..., 3] = -SH_C1 * x
    b[..., 4] = SH_C2[0] * xy
    b[..., 5] = SH_C2[1] * yz
    b[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    b[..., 7] = SH_C2[3] * xz
    b[..., 8] = SH_C2[4] * (xx - yy)
    b[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    b[..., 10] = SH_C3[1] * xy * z
    b[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    b[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    b[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    b[..., 14] = SH_C3[5] * z * (xx - yy)
    b[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return b


def sh_basis_grad(view_dir: np.ndarray) -> np.ndarray:
    """Jacobian of the 16 basis values w.r.t. the (unnormalized-free) direction.

    view_dir: (..., 3) -> (..., 16, 3); entry [..., j, k] = d basis_j / d v_k.
    """
    v = np.asarray(view_dir, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(v.shape[:-1] + (SH_COEFFS, 3))
    # degree 1
    g[..., 1, 1] = -SH_C1
    g[..., 2, 2] = SH_C1
    g[..., 3, 0] = -SH_C1
    # degree 2
    g[..., 4, 0] = SH_C2[0] * y
    g[..., 4, 1] = SH_C2[0] * x
    g[..., 5, 1] = SH_C2[1] * z
    g[..., 5, 2] = SH_C2[1] * y
    g[..., 6, 0] = SH_C2[2] * (-2.0 * x)
    g[..., 6, 1] = SH_C2[2] * (-2.0 * y)
    g[..., 6, 2] = SH_C2[2] * (4.0 * z)
    g[..., 7, 0] = SH_C2[3] * z
    g[..., 7, 2] = SH_C2[3] * x
    g[..., 8, 0] = SH_C2[4] * (2.0 * x)
    g[..., 8, 1] = SH_C2[4] * (-2.0 * y)
    # degree 3
    g[..., 9, 0] = SH_C3[0] * 6.0 * x * y
    g[..., 9, 1] = SH_C3[0] * (3.0 * x * x - 3.0 * y * y)
    g[..., 9, 2] = zero
    g[..., 10, 0] = SH_C3[1] * y * z
    g[..., 10, 1] = SH_C3[1] * x * z
    g[..., 10, 2] = SH_C3[1] * x * y
    g[..., 11, 0] = SH_C3[2] * (-2.0 * x * y)
    g[..., 11, 1] = SH_C3[2] * (4.0 * z * z - x * x - 3.0 * y * y)
    g[..., 11, 2] = SH_C3[2] * (8.0 * y * z)
    g[..., 12, 0] = SH_C3[3] * (-6.0 * x * z)
    g[..., 12, 1] = SH_C3[3] * (-6.0 * y * z)
    g[..., 12, 2] = SH_C3[3] * (6.0 * z * z - 3.0 * x * x - 3.0 * y * y)
    g[..., 13, 0] = SH_C3[4] * (4.0 * z * z - 3.0 * x * x - y * y)
    g[..., 13, 1] = SH_C3[4] * (-2.0 * x * y)
    g[..., 13, 2] = SH_C3[4] * (8.0 * x * z)
    g[..., 14, 0] = SH_C3[5] * (2.0 * x * z)
    g[..., 14, 1] = SH_C3[5] * (-2.0 * y * z)
    g[..., 14, 2] = SH_C3[5] * (x * x - y * y)
    g[..., 15, 0] = SH_C3[6] * (3.0 * x * x - 3.0 * y * y)
    g[..., 15, 1] = SH_C3[6] * (-6.0 * x * y)
    g[..., 15, 2] = zero
    return g


def sh_eval(sh_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """View-dependent rgb of 48 SH coefficients: per-channel basis dot product
    plus the DC offset, clamped at zero.

    sh_coeffs: (..., 3, 16) or flat (..., 48); view_dir: (..., 3) unit.
    """
    c = np.asarray(sh_coeffs, dtype=float)
    if c.shape[-1] == SH_DIM:
        c = c.reshape(c.shape[:-1] + (3, SH_COEFFS))
    b = sh_basis(view_dir)
    rgb = np.einsum("...cj,...j->...c", c, b) + DC_OFFSET
    return np.maximum(rgb, 0.0)


def rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    """DC coefficient that reproduces ``rgb`` exactly under ``sh_eval``."""
    return (np.asarray(rgb, dtype=float) - DC_OFFSET) / SH_C0


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def normalize_rotations(scene: GaussianScene, changed: np.ndarray | None = None) -> None:
    """Renormalize quaternions in place; restricted to ``changed`` rows if given
    so untouched particles stay bitwise identical."""
    if changed is None:
        idx = slice(None)
    else:
        idx = changed
    q = scene.rotations[idx]
    if q.size == 0:
        return
    scene.rotations[idx] = q / np.linalg.norm(q, axis=-1, keepdims=True)
