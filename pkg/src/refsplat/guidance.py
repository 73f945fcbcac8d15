"""Denoising-prior interface, noise schedule, score-distillation gradients,
the multi-scale distillation objective, and analytic test priors with
closed-form optimal denoisers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rasterizer import ParticleGrads, RasterSettings, RenderOutput, render, render_backward
from .scene import CameraView, GaussianScene, InvalidInputError, Label


# ---------------------------------------------------------------------------
# schedule and latents


@dataclass
class NoiseSchedule:
    """Variance-preserving cosine schedule: alpha(t) = cos(pi t / 2)."""

    t_min: float = 0.02
    t_max: float = 0.98

    def alpha(self, t: float) -> float:
        return np.cos(0.5 * np.pi * t)

    def sigma(self, t: float) -> float:
        return np.sin(0.5 * np.pi * t)

    def weight(self, t: float) -> float:
        return self.sigma(t) ** 2

    @property
    def t_range(self) -> tuple[float, float]:
        return (self.t_min, self.t_max)

    def sample_t(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.t_min, self.t_max))


@dataclass
class LatentImage:
    tensor: np.ndarray  # (c, h, w)
    codec_id: str


@dataclass
class Condition:
    """Conditioning bundle for a denoiser call."""

    masked_latent: LatentImage | None = None
    mask: np.ndarray | None = None  # latent-resolution binary mask
    prompt_tag: str = "global"  # "global" | "local"
    guidance: float = 7.5
    view_id: int = -1
    patch_box: tuple[int, int, int, int] | None = None  # (y0, x0, h, w) in render px


class PriorError(RuntimeError):
    """Denoising-prior failure (e.g. remote error), with context."""


class DenoisePrior:
    """Abstract denoiser plus codec plus schedule."""

    schedule: NoiseSchedule

    def encode(self, image: np.ndarray) -> LatentImage:
        raise NotImplementedError

    def decode(self, latent: LatentImage) -> np.ndarray:
        raise NotImplementedError

    def encode_adjoint(self, latent_grad: np.ndarray, image_shape: tuple[int, int]) -> np.ndarray:
        raise NotImplementedError

    def denoise(self, z_t: np.ndarray, t: float, condition: Condition) -> np.ndarray:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# built-in linear codec: k x k average pooling with exact adjoint


def _balanced_mean(values: np.ndarray) -> np.ndarray:
    """Mean over the last axis via pairwise reduction, so a block of equal
    values averages back to that value exactly (pooling a k-times upsampled
    latent recovers it bitwise for power-of-two block sizes)."""
    m = values.shape[-1]
    acc = values
    while acc.shape[-1] > 1:
        n = acc.shape[-1]
        half = n // 2
        pair = acc[..., : 2 * half : 2] + acc[..., 1 : 2 * half : 2]
        if n % 2:
            pair = np.concatenate([pair, acc[..., -1:]], axis=-1)
        acc = pair
    return acc[..., 0] / m


@dataclass
class LinearCodec:
    k: int = 4

    @property
    def codec_id(self) -> str:
        return f"avgpool{self.k}"

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        return (3, h // self.k, w // self.k)

    def encode(self, image: np.ndarray) -> LatentImage:
        H, W = image.shape[:2]
        k = self.k
        if H % k or W % k:
            raise InvalidInputError(f"image size {H}x{W} not divisible by pool size {k}")
        blocks = image.reshape(H // k, k, W // k, k, 3).transpose(0, 2, 4, 1, 3)
        z = _balanced_mean(blocks.reshape(H // k, W // k, 3, k * k))
        return LatentImage(np.moveaxis(z, -1, 0), self.codec_id)

    def decode(self, latent: LatentImage) -> np.ndarray:
        z = np.moveaxis(latent.tensor, 0, -1)
        return np.repeat(np.repeat(z, self.k, axis=0), self.k, axis=1)

    def encode_adjoint(self, latent_grad: np.ndarray, image_shape: tuple[int, int]) -> np.ndarray:
        g = np.moveaxis(latent_grad, 0, -1)
        up = np.repeat(np.repeat(g, self.k, axis=0), self.k, axis=1)
        return up / (self.k * self.k)


# ---------------------------------------------------------------------------
# core distillation algebra


def add_noise(schedule: NoiseSchedule, z: LatentImage, t: float, eps: np.ndarray) -> np.ndarray:
    """Forward-process sample alpha(t) z + sigma(t) eps."""
    if eps.shape != z.tensor.shape:
        raise InvalidInputError("noise shape must match latent shape")
    if not (schedule.t_min <= t <= schedule.t_max):
        raise InvalidInputError(f"t={t} outside schedule range {schedule.t_range}")
    return schedule.alpha(t) * z.tensor + schedule.sigma(t) * eps


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, guidance: float) -> np.ndarray:
    """Classifier-free guidance: (1 + a) eps_cond - a eps_uncond, evaluated
    as eps_cond + a (eps_cond - eps_uncond) so equal inputs pass through
    bit-exactly at any guidance strength."""
    if eps_cond.shape != eps_uncond.shape:
        raise InvalidInputError("shape mismatch")
    return eps_cond + guidance * (eps_cond - eps_uncond)


def sds_grad(
    prior: DenoisePrior,
    z: LatentImage,
    condition: Condition,
    t: float,
    eps: np.ndarray,
) -> np.ndarray:
    """Score-distillation gradient w.r.t. the latent:
    w(t) (eps_hat(z_t, t, c) - eps) * alpha(t)."""
    sched = prior.schedule
    z_t = add_noise(sched, z, t, eps)
    eps_hat = prior.denoise(z_t, t, condition)
    return sched.weight(t) * sched.alpha(t) * (eps_hat - eps)


def analytic_denoiser(
    schedule: NoiseSchedule,
    z_t: np.ndarray,
    t: float,
    targets: list[np.ndarray],
    weights: list[float] | None = None,
) -> np.ndarray:
    """Exact posterior-mean denoiser for a point-mass mixture distribution."""
    if len(targets) == 0:
        raise InvalidInputError("need at least one target")
    a, s = schedule.alpha(t), schedule.sigma(t)
    if weights is None:
        weights = [1.0] * len(targets)
    logw = np.array(
        [np.log(w) - np.sum((z_t - a * zk) ** 2) / (2.0 * s * s) for w, zk in zip(weights, targets)]
    )
    logw -= logw.max()
    p = np.exp(logw)
    p /= p.sum()
    posterior_mean = sum(pk * zk for pk, zk in zip(p, targets))
    return (z_t - a * posterior_mean) / s


class DiracPrior(DenoisePrior):
    """Optimal denoiser for a single point mass; the target may depend on the
    condition (per-view / per-patch targets) via ``target_fn``."""

    def __init__(self, codec: LinearCodec, schedule: NoiseSchedule, target_fn):
        self.codec = codec
        self.schedule = schedule
        self.target_fn = target_fn  # Condition -> target image (h, w, 3)

    def encode(self, image):
        return self.codec.encode(image)

    def decode(self, latent):
        return self.codec.decode(latent)

    def encode_adjoint(self, latent_grad, image_shape):
        return self.codec.encode_adjoint(latent_grad, image_shape)

    def denoise(self, z_t, t, condition):
        target = self.codec.encode(self.target_fn(condition)).tensor
        return analytic_denoiser(self.schedule, z_t, t, [target])


class MixturePrior(DenoisePrior):
    """Optimal denoiser for a weighted point-mass mixture over fixed targets."""

    def __init__(self, codec: LinearCodec, schedule: NoiseSchedule, target_images, weights=None):
        self.codec = codec
        self.schedule = schedule
        self.targets = [codec.encode(img).tensor for img in target_images]
        self.weights = weights

    def encode(self, image):
        return self.codec.encode(image)

    def decode(self, latent):
        return self.codec.decode(latent)

    def encode_adjoint(self, latent_grad, image_shape):
        return self.codec.encode_adjoint(latent_grad, image_shape)

    def denoise(self, z_t, t, condition):
        return analytic_denoiser(self.schedule, z_t, t, self.targets, self.weights)


# ---------------------------------------------------------------------------
# bilinear resize with exact adjoint


def _resize_taps(n_src: int, n_dst: int):
    x = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    x = np.clip(x, 0.0, n_src - 1.0)
    i0 = np.floor(x).astype(int)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w1 = x - i0
    return i0, i1, 1.0 - w1, w1


def bilinear_resize(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize (align_corners=False); linear in the input."""
    H, W = img.shape[:2]
    h2, w2 = out_hw
    r0, r1, rw0, rw1 = _resize_taps(H, h2)
    c0, c1, cw0, cw1 = _resize_taps(W, w2)
    rows = img[r0] * rw0.reshape(-1, *([1] * (img.ndim - 1))) + img[r1] * rw1.reshape(
        -1, *([1] * (img.ndim - 1))
    )
    shape_c = (1, -1) + (1,) * (img.ndim - 2)
    return rows[:, c0] * cw0.reshape(shape_c) + rows[:, c1] * cw1.reshape(shape_c)


def bilinear_resize_adjoint(grad: np.ndarray, in_hw: tuple[int, int]) -> np.ndarray:
    """Exact adjoint of ``bilinear_resize``: scatter the 4-tap weights."""
    h2, w2 = grad.shape[:2]
    H, W = in_hw
    r0, r1, rw0, rw1 = _resize_taps(H, h2)
    c0, c1, cw0, cw1 = _resize_taps(W, w2)
    shape_c = (1, -1) + (1,) * (grad.ndim - 2)
    tmp = np.zeros((h2, W) + grad.shape[2:])
    np.add.at(tmp, (slice(None), c0), grad * cw0.reshape(shape_c))
    np.add.at(tmp, (slice(None), c1), grad * cw1.reshape(shape_c))
    out = np.zeros((H, W) + grad.shape[2:])
    shape_r = (-1,) + (1,) * (grad.ndim - 1)
    np.add.at(out, (r0,), tmp * rw0.reshape(shape_r))
    np.add.at(out, (r1,), tmp * rw1.reshape(shape_r))
    return out


# ---------------------------------------------------------------------------
# multi-scale SDS


@dataclass
class SdsConfig:
    native_resolution: int = 64  # prior's native image side, in render pixels
    n_local_patches: int = 2
    guidance: float = 7.5
    include_global: bool = True
    include_local: bool = True


@dataclass
class SdsDrawPlan:
    """Pre-drawn randomness for one distillation step (reproducibility)."""

    t_global: float
    eps_global: np.ndarray
    locals: list  # list of (cy_unit, cx_unit, t, eps)


def sample_sds_draws(rng: np.random.Generator, prior: DenoisePrior, cfg: SdsConfig) -> SdsDrawPlan:
    nat = cfg.native_resolution
    c, h, w = prior.encode(np.zeros((nat, nat, 3))).tensor.shape
    sched = prior.schedule
    t_g = sched.sample_t(rng)
    eps_g = rng.standard_normal((c, h, w))
    locs = []
    for _ in range(cfg.n_local_patches):
        cy, cx = rng.uniform(), rng.uniform()
        locs.append((cy, cx, sched.sample_t(rng), rng.standard_normal((c, h, w))))
    return SdsDrawPlan(t_g, eps_g, locs)


def _mask_bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return int(ys.min()), int(ys.max()), int(xs.min()), int(xs.max())


def _clamp_patch(cy: float, cx: float, bbox, size: int, H: int, W: int):
    y0b, y1b, x0b, x1b = bbox
    cy_px = y0b + cy * (y1b - y0b + 1)
    cx_px = x0b + cx * (x1b - x0b + 1)
    y0 = int(round(cy_px - size / 2))
    x0 = int(round(cx_px - size / 2))
    y0 = min(max(y0, 0), H - size)
    x0 = min(max(x0, 0), W - size)
    return y0, x0


def multiscale_sds(
    scene: GaussianScene,
    camera: CameraView,
    consistent_mask: np.ndarray,
    prior: DenoisePrior,
    cfg: SdsConfig,
    rng: np.random.Generator | None = None,
    plan: SdsDrawPlan | None = None,
    settings: RasterSettings | None = None,
    render_out: RenderOutput | None = None,
) -> tuple[ParticleGrads, dict]:
    """Global + local score-distillation gradients for the Masked particles.

    The global branch downsamples the full render to the prior's native
    resolution; the local branch averages native-resolution patches sampled
    from the mask's bounding box. Unmasked particles receive exact zeros.
    """
    if plan is None:
        plan = sample_sds_draws(rng or np.random.default_rng(), prior, cfg)
    nat = cfg.native_resolution
    H, W = camera.height, camera.width
    if nat > min(H, W):
        raise InvalidInputError("native resolution exceeds render size")
    out = render_out if render_out is not None else render(scene, camera, settings)
    rgb = out.rgb
    upstream_rgb = np.zeros_like(rgb)
    diag = {"sds_global": 0.0, "sds_local": 0.0, "local_skipped": False}
    sched = prior.schedule

    if cfg.include_global:
        img = bilinear_resize(rgb, (nat, nat))
        mask_nat = bilinear_resize(consistent_mask.astype(float), (nat, nat)) > 0.5
        cond = _make_condition(prior, img, mask_nat, "global", cfg.guidance, camera.view_id, None)
        z = prior.encode(img)
        g_z = sds_grad(prior, z, cond, plan.t_global, plan.eps_global)
        g_img = prior.encode_adjoint(g_z, (nat, nat))
        upstream_rgb += bilinear_resize_adjoint(g_img, (H, W))
        diag["sds_global"] = float(0.5 * np.mean(g_z**2) / max(sched.weight(plan.t_global), 1e-12))

    if cfg.include_local:
        bbox = _mask_bbox(consistent_mask)
        if bbox is None:
            diag["local_skipped"] = True
        else:
            n = len(plan.locals)
            acc = np.zeros_like(rgb)
            for cy, cx, t, eps in plan.locals:
                y0, x0 = _clamp_patch(cy, cx, bbox, nat, H, W)
                patch = rgb[y0 : y0 + nat, x0 : x0 + nat]
                pmask = consistent_mask[y0 : y0 + nat, x0 : x0 + nat] > 0.5
                cond = _make_condition(
                    prior, patch, pmask, "local", cfg.guidance, camera.view_id, (y0, x0, nat, nat)
                )
                z = prior.encode(patch)
                g_z = sds_grad(prior, z, cond, t, eps)
                g_img = prior.encode_adjoint(g_z, (nat, nat))
                acc[y0 : y0 + nat, x0 : x0 + nat] += g_img
                diag["sds_local"] += float(0.5 * np.mean(g_z**2) / max(sched.weight(t), 1e-12)) / n
            upstream_rgb += acc / n

    zeros = np.zeros((H, W))
    grads = render_backward(
        scene,
        camera,
        RenderOutput(rgb=upstream_rgb, depth=zeros, alpha=zeros, semantic=zeros),
        settings,
    )
    unmasked = scene.labels != Label.MASKED
    for arr in grads.fields().values():
        arr[unmasked] = 0.0
    return grads, diag


def _make_condition(prior, img, mask_bool, tag, guidance, view_id, patch_box):
    masked_img = img * (1.0 - mask_bool[:, :, None].astype(float))
    try:
        masked_latent = prior.encode(masked_img)
    except Exception:
        masked_latent = None
    lat_mask = mask_bool
    return Condition(
        masked_latent=masked_latent,
        mask=lat_mask,
        prompt_tag=tag,
        guidance=guidance,
        view_id=view_id,
        patch_box=patch_box,
    )
