"""Depth regularization: inpaint the current render with the denoising
prior, estimate depth for the inpainted image, align it to the rendered
depth, and penalize the squared mismatch on masked pixels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .guidance import Condition, DenoisePrior, LatentImage, bilinear_resize
from .rasterizer import ParticleGrads, RasterSettings, RenderOutput, render, render_backward
from .reference import align_depth, bilateral_refine
from .scene import CameraView, GaussianScene, InvalidInputError, Label


class DepthOracle:
    """Monocular depth estimation interface: image -> relative depth map."""

    def __call__(self, image: np.ndarray, camera: CameraView) -> np.ndarray:
        raise NotImplementedError


class GroundTruthDepthOracle(DepthOracle):
    """Test oracle: renders true depth from a hidden complete scene, then
    applies a fixed affine perturbation so alignment has work to do."""

    def __init__(self, complete_scene: GaussianScene, scale: float = 0.5, offset: float = 0.25,
                 settings: RasterSettings | None = None):
        self.scene = complete_scene
        self.scale = scale
        self.offset = offset
        self.settings = settings

    def __call__(self, image: np.ndarray, camera: CameraView) -> np.ndarray:
        depth = render(self.scene, camera, self.settings).depth
        return self.scale * depth + self.offset


def ddim_denoise(
    prior: DenoisePrior,
    z_t: np.ndarray,
    t_start: float,
    condition: Condition,
    steps: int = 10,
) -> np.ndarray:
    """Deterministic denoising from t_start to 0 in equal steps: at each step
    predict the clean latent from the noise estimate and re-noise to the next
    time (final step returns the clean prediction)."""
    if steps < 1:
        raise InvalidInputError("need at least one denoising step")
    sched = prior.schedule
    ts = np.linspace(t_start, 0.0, steps + 1)
    z = z_t
    for t_curr, t_next in zip(ts[:-1], ts[1:]):
        eps_hat = prior.denoise(z, float(t_curr), condition)
        a, s = sched.alpha(float(t_curr)), sched.sigma(float(t_curr))
        z0_hat = (z - s * eps_hat) / a
        if t_next <= 0.0:
            z = z0_hat
        else:
            z = sched.alpha(float(t_next)) * z0_hat + sched.sigma(float(t_next)) * eps_hat
    return z


@dataclass
class DepthLossResult:
    loss: float
    grads: ParticleGrads
    aligned_target: np.ndarray | None = None  # refined target depth map
    skipped: bool = False


@dataclass
class DepthConfig:
    denoise_steps: int = 10
    native_resolution: int = 64  # prior's working resolution, in render pixels
    guidance: float = 7.5
    bilateral_iterations: int = 10


def depth_loss(
    scene: GaussianScene,
    camera: CameraView,
    consistent_mask: np.ndarray,
    prior: DenoisePrior,
    depth_oracle: DepthOracle,
    t_depth: float,
    eps: np.ndarray | None = None,
    config: DepthConfig | None = None,
    rng: np.random.Generator | None = None,
    settings: RasterSettings | None = None,
) -> DepthLossResult:
    """Mean squared depth error over masked pixels, with gradients flowing
    only through the rendered depth channel into Masked particles.

    The target depth is produced by inpainting the current render (latent
    noised to ``t_depth`` and denoised deterministically), estimating
    relative depth with ``depth_oracle``, aligning scale/offset against the
    rendered depth on unmasked pixels, and refining it edge-aware. Oracle
    failure skips the step and flags it.
    """
    cfg = config or DepthConfig()
    H, W = camera.height, camera.width
    if consistent_mask.shape != (H, W):
        raise InvalidInputError("mask dimensions must match the camera")
    out = render(scene, camera, settings)
    mask = consistent_mask.astype(bool)
    n_particles = len(scene)

    nat = cfg.native_resolution
    img = bilinear_resize(out.rgb, (nat, nat))
    mask_nat = bilinear_resize(mask.astype(float), (nat, nat)) > 0.5
    sched = prior.schedule
    if not (sched.t_min <= t_depth <= sched.t_max):
        raise InvalidInputError(f"t_depth={t_depth} outside schedule range")
    z = prior.encode(img)
    if eps is None:
        eps = (rng or np.random.default_rng()).standard_normal(z.tensor.shape)
    masked_img = img * (1.0 - mask_nat[:, :, None])
    cond = Condition(
        masked_latent=prior.encode(masked_img),
        mask=mask_nat,
        prompt_tag="global",
        guidance=cfg.guidance,
        view_id=camera.view_id,
    )
    z_t = sched.alpha(t_depth) * z.tensor + sched.sigma(t_depth) * eps
    z0 = ddim_denoise(prior, z_t, t_depth, cond, steps=cfg.denoise_steps)
    inpainted = prior.decode(LatentImage(z0, z.codec_id))
    inpainted_full = bilinear_resize(inpainted, (H, W))

    try:
        relative = depth_oracle(inpainted_full, camera)
    except Exception:
        return DepthLossResult(0.0, ParticleGrads.zeros(n_particles), skipped=True)
    if relative.shape != (H, W) or not np.isfinite(relative).all():
        return DepthLossResult(0.0, ParticleGrads.zeros(n_particles), skipped=True)

    alignment = align_depth(relative, out.depth, ~mask)
    target = bilateral_refine(
        alignment.aligned_depth, inpainted_full, mask,
        iterations=cfg.bilateral_iterations,
    )

    n_masked = int(mask.sum())
    if n_masked == 0:
        return DepthLossResult(0.0, ParticleGrads.zeros(n_particles))
    diff = np.where(mask, out.depth - target, 0.0)
    loss = float(np.sum(diff**2) / n_masked)

    upstream = RenderOutput(
        rgb=np.zeros((H, W, 3)),
        depth=2.0 * diff / n_masked,
        alpha=np.zeros((H, W)),
        semantic=np.zeros((H, W)),
    )
    grads = render_backward(scene, camera, upstream, settings)
    unmasked = scene.labels != Label.MASKED
    for arr in grads.fields().values():
        arr[unmasked] = 0.0
    return DepthLossResult(loss, grads, aligned_target=target)
