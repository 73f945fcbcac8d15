"""Adversarial patch regularization: an MLP patch discriminator trained with
a softplus-form GAN loss and a gradient penalty, plus the patch sampler and
the generator-side pixel gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .scene import InvalidInputError


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class Discriminator:
    """MLP over flattened patches: patch -> 256 -> 256 -> 1 logit,
    leaky-ReLU (slope 0.2) activations."""

    HIDDEN = (256, 256)

    def __init__(self, patch_size: int = 64, rng: np.random.Generator | None = None, hidden=None):
        rng = rng or np.random.default_rng(0)
        self.patch_size = patch_size
        dims = [patch_size * patch_size * 3, *(self.HIDDEN if hidden is None else hidden), 1]
        self.weights = [
            rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)
            for d_in, d_out in zip(dims, dims[1:])
        ]
        self.biases = [np.zeros(d) for d in dims[1:]]

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def set_params(self, values: list[np.ndarray]) -> None:
        k = len(self.weights)
        if len(values) != 2 * k:
            raise InvalidInputError(f"expected {2 * k} parameter arrays, got {len(values)}")
        self.weights = [np.asarray(v, float) for v in values[:k]]
        self.biases = [np.asarray(v, float) for v in values[k:]]

    def forward(self, x: ad.Var, params: list[ad.Var]) -> ad.Var:
        """Logits (n, 1) for flattened patches (n, d), on the tape."""
        k = len(self.weights)
        ws, bs = params[:k], params[k:]
        h = x
        for i, (w, b) in enumerate(zip(ws, bs)):
            h = ad.add_bias(ad.matmul(h, w), b)
            if i < k - 1:
                h = ad.leaky_relu(h, 0.2)
        return h

    def logits(self, patches: np.ndarray) -> np.ndarray:
        x = ad.const(_flatten(patches))
        params = [ad.const(p) for p in self.params()]
        return self.forward(x, params).value


def _flatten(patches: np.ndarray) -> np.ndarray:
    return np.asarray(patches, float).reshape(patches.shape[0], -1)


def sample_patches(
    reference_image: np.ndarray,
    rendered_image: np.ndarray,
    mask: np.ndarray,
    n: int,
    size: int,
    rng: np.random.Generator,
    dilate: float = 0.25,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """n real patches from the reference and n fake patches from the render,
    centered uniformly in the mask's dilated bounding box, clamped inside the
    image. Returns (real (n,s,s,3), fake (n,s,s,3), coords (n,2))."""
    H, W = mask.shape
    if reference_image.shape[:2] != (H, W) or rendered_image.shape[:2] != (H, W):
        raise InvalidInputError("image and mask dimensions must match")
    if size > H or size > W:
        raise InvalidInputError(f"patch size {size} exceeds image {H}x{W}")
    if n == 0:
        empty = np.zeros((0, size, size, 3))
        return empty, empty.copy(), np.zeros((0, 2), dtype=int)
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise InvalidInputError("mask is empty")
    y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
    dy = int(round(dilate * (y1 - y0 + 1)))
    dx = int(round(dilate * (x1 - x0 + 1)))
    y0, y1 = max(0, y0 - dy), min(H - 1, y1 + dy)
    x0, x1 = max(0, x0 - dx), min(W - 1, x1 + dx)
    cy = rng.integers(y0, y1 + 1, size=n)
    cx = rng.integers(x0, x1 + 1, size=n)
    ty = np.clip(cy - size // 2, 0, H - size)
    tx = np.clip(cx - size // 2, 0, W - size)
    real = np.stack([reference_image[a : a + size, b : b + size] for a, b in zip(ty, tx)])
    fake = np.stack([rendered_image[a : a + size, b : b + size] for a, b in zip(ty, tx)])
    return real, fake, np.stack([ty, tx], axis=1)


@dataclass
class AdvStepResult:
    disc_loss: float  # value the discriminator maximizes
    gen_loss: float  # mean f(D(fake)), minimized by the generator
    param_grads: list  # ascent direction for the discriminator parameters
    fake_pixel_grads: np.ndarray  # d gen_loss / d fake pixels, (n, s, s, 3)
    skipped: bool = False


def adv_step(
    disc: Discriminator,
    real: np.ndarray,
    fake: np.ndarray,
    lambda_gp: float = 1.0,
    penalty_on: str = "fake",
) -> AdvStepResult:
    """One adversarial evaluation.

    Discriminator objective (maximized): E[f(D(fake))] + E[f(-D(real))]
    - lambda_gp E[|grad_x D(x_pen)|^2], with the penalty taken on fake
    patches by default (``penalty_on`` switches it to "real").
    Generator objective (minimized): E[f(D(fake))], differentiated w.r.t.
    the fake pixels.
    """
    if penalty_on not in ("fake", "real"):
        raise InvalidInputError("penalty_on must be 'fake' or 'real'")
    if real.shape != fake.shape:
        raise InvalidInputError("real/fake patch batches must share shape")
    params = [ad.Var(p) for p in disc.params()]
    x_fake = ad.Var(_flatten(fake))
    x_real = ad.const(_flatten(real))

    d_fake = disc.forward(x_fake, params)
    d_real = disc.forward(x_real, params)
    term_fake = ad.mean(ad.gan_f(d_fake))
    term_real = ad.mean(ad.gan_f(ad.neg(d_real)))

    x_pen = x_fake if penalty_on == "fake" else ad.Var(x_real.value)
    d_pen = disc.forward(x_pen, params) if penalty_on == "real" else d_fake
    (pixel_grad,) = ad.grad(ad.total(d_pen), [x_pen])
    penalty = ad.scale(ad.total(ad.square(pixel_grad)), 1.0 / real.shape[0])

    disc_obj = ad.sub(ad.add(term_fake, term_real), ad.scale(penalty, lambda_gp))
    if not (
        np.isfinite(d_fake.value).all()
        and np.isfinite(d_real.value).all()
        and np.isfinite(disc_obj.value)
    ):
        zeros = [np.zeros_like(p) for p in disc.params()]
        return AdvStepResult(float("nan"), float("nan"), zeros, np.zeros_like(fake), skipped=True)

    param_grads = [g.value for g in ad.grad(disc_obj, params)]
    (gen_grad,) = ad.grad(term_fake, [x_fake])
    return AdvStepResult(
        disc_loss=float(disc_obj.value),
        gen_loss=float(term_fake.value),
        param_grads=param_grads,
        fake_pixel_grads=gen_grad.value.reshape(fake.shape),
    )


def adam_update(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float = 2e-3,
    betas: tuple[float, float] = (0.0, 0.99),
    eps: float = 1e-8,
) -> list[np.ndarray]:
    """One Adam step in the direction of ``grads`` (caller fixes the sign)."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.m.get(i, np.zeros_like(p))
        v = state.v.get(i, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[i], state.v[i] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out.append(p + lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


def scatter_patch_grads(
    pixel_grads: np.ndarray, coords: np.ndarray, image_shape: tuple[int, int]
) -> np.ndarray:
    """Accumulate per-patch pixel gradients into a full-image gradient;
    pixels outside every sampled patch stay exactly zero."""
    H, W = image_shape
    out = np.zeros((H, W, 3))
    s = pixel_grads.shape[1]
    for g, (ty, tx) in zip(pixel_grads, coords):
        out[ty : ty + s, tx : tx + s] += g
    return out
