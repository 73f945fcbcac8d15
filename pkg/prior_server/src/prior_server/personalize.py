"""Adapter fine-tuning on a single reference image.

Trains only the low-rank adapter weights so the denoiser learns the
reference scene's appearance. Each step uses a fresh crop of the
reference — alternating a near-full view with a thin random border
removed and a tight local window around the region of interest — paired
with a fresh random rectangular hole, so the model never sees the same
(crop, mask) pair twice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .model import PROMPTS, InpaintPrior, add_noise, lora_parameters


@dataclass
class PersonalizeConfig:
    steps: int = 2000
    lr_denoiser: float = 2e-4
    lr_prompt: float = 4e-5
    border_frac_max: float = 0.05   # global crops trim up to this per side
    min_reference_size: int = 512   # shortest side the reference must have
    seed: int = 0


def _resize(image: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0).numpy()


def _global_crop(image: np.ndarray, rng: np.random.Generator,
                 border_frac_max: float) -> np.ndarray:
    h, w = image.shape[:2]
    fy0, fy1, fx0, fx1 = rng.uniform(0.0, border_frac_max, size=4)
    y0, y1 = int(fy0 * h), h - int(fy1 * h)
    x0, x1 = int(fx0 * w), w - int(fx1 * w)
    return image[y0:y1, x0:x1]


def _local_crop(image: np.ndarray, roi: np.ndarray | None,
                rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    side = int(rng.uniform(0.25, 0.5) * min(h, w))
    if roi is not None and roi.any():
        ys, xs = np.nonzero(roi)
        cy, cx = int(ys.mean()), int(xs.mean())
        cy += rng.integers(-side // 4, side // 4 + 1)
        cx += rng.integers(-side // 4, side // 4 + 1)
    else:
        cy = rng.integers(side // 2, h - side // 2)
        cx = rng.integers(side // 2, w - side // 2)
    y0 = int(np.clip(cy - side // 2, 0, h - side))
    x0 = int(np.clip(cx - side // 2, 0, w - side))
    return image[y0:y0 + side, x0:x0 + side]


def _random_rect_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    mh = rng.integers(size // 4, size // 2 + 1)
    mw = rng.integers(size // 4, size // 2 + 1)
    y0 = rng.integers(0, size - mh + 1)
    x0 = rng.integers(0, size - mw + 1)
    m = np.zeros((size, size), dtype=np.float32)
    m[y0:y0 + mh, x0:x0 + mw] = 1.0
    return m


def sample_batch(image: np.ndarray, roi: np.ndarray | None,
                 rng: np.random.Generator, step: int, resolution: int,
                 border_frac_max: float) -> tuple[np.ndarray, np.ndarray, str]:
    """One (crop, mask, prompt_tag) training example for a given step."""
    if step % 2 == 0:
        crop, tag = _global_crop(image, rng, border_frac_max), "global"
    else:
        crop, tag = _local_crop(image, roi, rng), "local"
    return _resize(crop, resolution), _random_rect_mask(resolution, rng), tag


def _training_loss(model: InpaintPrior, crop: np.ndarray, mask: np.ndarray,
                   tag: str, rng: np.random.Generator) -> torch.Tensor:
    k = model.cfg.latent_down
    z0 = torch.from_numpy(model.encode_image(crop)).unsqueeze(0)
    masked = torch.from_numpy(model.encode_image(crop * (1.0 - mask[..., None]))).unsqueeze(0)
    m_lat = F.max_pool2d(torch.from_numpy(mask).reshape(1, 1, *mask.shape), k)
    t = float(rng.uniform(0.02, 0.98))
    eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape)).astype(np.float32))
    z_t = add_noise(z0, t, eps)
    pred = model.denoiser(z_t, t, m_lat, masked, model.prompts(PROMPTS[tag]))
    return F.mse_loss(pred, eps)


def synthetic_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random smooth sinusoidal texture used for generic base pretraining."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.zeros((size, size, 3))
    for c in range(3):
        a, b, p, q = rng.uniform(0.0, 1.0, 4)
        img[..., c] = 0.5 + 0.25 * (np.sin(2 * np.pi * (3 * a * yy + 3 * b * xx + p))
                                    * np.cos(2 * np.pi * 2 * q * xx))
    return np.clip(img + 0.05 * rng.standard_normal((size, size, 3)), 0.0, 1.0)


def pretrain_base(model: InpaintPrior, steps: int = 1500, lr: float = 1e-3,
                  seed: int = 123) -> list[float]:
    """Train the full base model on generic procedural textures so the frozen
    pathways carry signal before any adapter is attached."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    history: list[float] = []
    res = model.cfg.resolution
    for step in range(steps):
        crop = synthetic_texture(rng, res)
        mask = _random_rect_mask(res, rng)
        tag = "global" if step % 2 == 0 else "local"
        loss = _training_loss(model, crop, mask, tag, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.item()))
    model.eval()
    return history


def personalize(model: InpaintPrior, image: np.ndarray,
                roi: np.ndarray | None = None,
                config: PersonalizeConfig | None = None,
                progress=None) -> list[float]:
    """Fine-tune the model's adapters in place; returns the loss history."""
    cfg = config or PersonalizeConfig()
    if min(image.shape[:2]) < cfg.min_reference_size:
        raise ValueError(
            f"reference shortest side {min(image.shape[:2])} is below the "
            f"required {cfg.min_reference_size}")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam([
        {"params": list(lora_parameters(model.denoiser)), "lr": cfg.lr_denoiser},
        {"params": list(lora_parameters(model.prompts)), "lr": cfg.lr_prompt},
    ])
    model.train()
    history: list[float] = []
    for step in range(cfg.steps):
        crop, mask, tag = sample_batch(image, roi, rng, step,
                                       model.cfg.resolution, cfg.border_frac_max)
        loss = _training_loss(model, crop, mask, tag, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.item()))
        if progress is not None:
            progress(step + 1, cfg.steps)
    model.eval()
    return history


@torch.no_grad()
def heldout_loss(model: InpaintPrior, image: np.ndarray,
                 roi: np.ndarray | None, n_crops: int = 64,
                 seed: int = 12345) -> float:
    """Mean denoising loss on a fixed-seed crop set; adapter-agnostic, so it
    compares base and personalized models on identical inputs."""
    rng = np.random.default_rng(seed)
    model.eval()
    total = 0.0
    for step in range(n_crops):
        crop, mask, tag = sample_batch(image, roi, rng, step,
                                       model.cfg.resolution, 0.05)
        total += float(_training_loss(model, crop, mask, tag, rng).item())
    return total / n_crops
