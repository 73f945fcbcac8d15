"""Latent inpainting diffusion model with low-rank adapters.

Desk-scale stand-in for a large pretrained inpainting model: a lossless
space-to-depth codec, a small conditional UNet denoiser with one
self-attention block, a byte-level prompt encoder, and LoRA adapters on
every attention projection (denoiser and prompt encoder). The adapter's
B matrices start at zero, so a freshly attached adapter leaves the base
model's function unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PROMPTS = {
    "global": "A photo of sks",
    "local": "A photo of sks, cropped",
}


@dataclass
class ModelConfig:
    resolution: int = 64          # model operating resolution (square)
    latent_down: int = 4          # space-to-depth factor; latent c = 3*k*k
    base_channels: int = 32
    time_dim: int = 64
    prompt_dim: int = 32
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    seed: int = 0

    @property
    def latent_channels(self) -> int:
        return 3 * self.latent_down * self.latent_down

    @property
    def latent_resolution(self) -> int:
        return self.resolution // self.latent_down


# ---------------------------------------------------------------------------
# codec: lossless space-to-depth


class Codec:
    """Invertible pixel (un)shuffle between (3,H,W) images and latents."""

    def __init__(self, k: int):
        self.k = k

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-1] % self.k or image.shape[-2] % self.k:
            raise ValueError(f"image size {tuple(image.shape)} not divisible by {self.k}")
        return F.pixel_unshuffle(image, self.k)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return F.pixel_shuffle(latent, self.k)


# ---------------------------------------------------------------------------
# variance-preserving cosine schedule


def alpha_sigma(t: float) -> tuple[float, float]:
    return math.cos(math.pi * t / 2.0), math.sin(math.pi * t / 2.0)


def add_noise(z0: torch.Tensor, t: float, eps: torch.Tensor) -> torch.Tensor:
    a, s = alpha_sigma(t)
    return a * z0 + s * eps


# ---------------------------------------------------------------------------
# LoRA


class LoRALinear(nn.Module):
    """Linear layer with a zero-initialized low-rank residual update."""

    def __init__(self, in_features: int, out_features: int, rank: int = 8,
                 alpha: float = 16.0, dropout: float = 0.1):
        super().__init__()
        self.base = nn.Linear(in_features, out_features)
        self.lora_a = nn.Linear(in_features, rank, bias=False)
        self.lora_b = nn.Linear(rank, out_features, bias=False)
        nn.init.kaiming_uniform_(self.lora_a.weight, a=math.sqrt(5))
        nn.init.zeros_(self.lora_b.weight)
        self.scale = alpha / rank
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * self.lora_b(self.lora_a(self.dropout(x)))

    def lora_parameters(self):
        yield from self.lora_a.parameters()
        yield from self.lora_b.parameters()


def lora_parameters(module: nn.Module):
    for m in module.modules():
        if isinstance(m, LoRALinear):
            yield from m.lora_parameters()


def reset_adapters(module: nn.Module):
    """Zero every adapter's B matrix: restores the base model's function."""
    for m in module.modules():
        if isinstance(m, LoRALinear):
            nn.init.zeros_(m.lora_b.weight)


# ---------------------------------------------------------------------------
# prompt encoder


class PromptEncoder(nn.Module):
    """Byte-level embedding, mean-pooled, through a LoRA-adapted projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.table = nn.Embedding(256, cfg.prompt_dim)
        self.proj = LoRALinear(cfg.prompt_dim, cfg.prompt_dim,
                               cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout)
        self.null_embedding = nn.Parameter(torch.zeros(cfg.prompt_dim))

    def forward(self, prompt: str | None) -> torch.Tensor:
        if prompt is None:
            return self.null_embedding
        codes = torch.tensor(list(prompt.encode("utf-8")), dtype=torch.long)
        return self.proj(self.table(codes).mean(dim=0))


# ---------------------------------------------------------------------------
# denoiser UNet


def _time_embedding(t: float, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half))
    angles = freqs * t
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class SelfAttention(nn.Module):
    """Single-head attention over spatial positions, LoRA on q/k/v/out."""

    def __init__(self, channels: int, cfg: ModelConfig):
        super().__init__()
        kw = dict(rank=cfg.lora_rank, alpha=cfg.lora_alpha, dropout=cfg.lora_dropout)
        self.q = LoRALinear(channels, channels, **kw)
        self.k = LoRALinear(channels, channels, **kw)
        self.v = LoRALinear(channels, channels, **kw)
        self.out = LoRALinear(channels, channels, **kw)
        self.norm = nn.GroupNorm(4, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        seq = self.norm(x).reshape(b, c, h * w).transpose(1, 2)  # (b, hw, c)
        q, k, v = self.q(seq), self.k(seq), self.v(seq)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.out(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class Denoiser(nn.Module):
    """Conditional epsilon-prediction UNet over latents.

    Input channels: z_t, the masked-reference latent, and the binary mask;
    conditioning by time and prompt embeddings via feature-wise affine
    modulation at the bottleneck.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c_lat = cfg.latent_channels
        c = cfg.base_channels
        self.inp = nn.Conv2d(2 * c_lat + 1, c, 3, padding=1)
        self.down = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.mid1 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.attn = SelfAttention(2 * c, cfg)
        self.mid2 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.up = nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1)
        self.out = nn.Conv2d(2 * c, c_lat, 3, padding=1)
        self.film = nn.Linear(cfg.time_dim + cfg.prompt_dim, 4 * c)

    def forward(self, z_t: torch.Tensor, t: float, mask: torch.Tensor,
                masked_latent: torch.Tensor, prompt_embedding: torch.Tensor) -> torch.Tensor:
        x = torch.cat([z_t, masked_latent, mask], dim=1)
        h0 = F.silu(self.inp(x))
        h = F.silu(self.down(h0))
        cond = torch.cat([_time_embedding(t, self.cfg.time_dim), prompt_embedding])
        gamma, beta = self.film(cond).chunk(2)
        h = F.silu(self.mid1(h))
        h = h * (1 + gamma.view(1, -1, 1, 1)) + beta.view(1, -1, 1, 1)
        h = self.attn(h)
        h = F.silu(self.mid2(h))
        h = F.silu(self.up(h))
        return self.out(torch.cat([h, h0], dim=1))


# ---------------------------------------------------------------------------
# full model


class InpaintPrior(nn.Module):
    """Codec + conditional denoiser + prompt encoder, with CFG and DDIM."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        torch.manual_seed(self.cfg.seed)
        self.codec = Codec(self.cfg.latent_down)
        self.denoiser = Denoiser(self.cfg)
        self.prompts = PromptEncoder(self.cfg)

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) float image -> (c, h, w) latent."""
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
        z = self.codec.encode(x.permute(2, 0, 1))
        return z.numpy()

    def decode_latent(self, latent: np.ndarray) -> np.ndarray:
        z = torch.from_numpy(np.ascontiguousarray(latent, dtype=np.float32))
        return self.codec.decode(z).permute(1, 2, 0).numpy()

    def _prepare(self, z_t, mask, masked_latent):
        z = torch.as_tensor(z_t, dtype=torch.float32).unsqueeze(0)
        if masked_latent is None:
            masked_latent = torch.zeros_like(z)
        else:
            masked_latent = torch.as_tensor(masked_latent, dtype=torch.float32).unsqueeze(0)
        if mask is None:
            m = torch.zeros(1, 1, z.shape[-2], z.shape[-1])
        else:
            m = torch.as_tensor(mask, dtype=torch.float32).reshape(1, 1, z.shape[-2], z.shape[-1])
        return z, m, masked_latent

    @torch.no_grad()
    def eps(self, z_t: np.ndarray, t: float, mask, masked_latent,
            prompt_tag: str | None) -> np.ndarray:
        """Single (un)conditional epsilon prediction, no guidance."""
        self.eval()
        z, m, ml = self._prepare(z_t, mask, masked_latent)
        prompt = PROMPTS[prompt_tag] if prompt_tag is not None else None
        out = self.denoiser(z, float(t), m, ml, self.prompts(prompt))
        return out.squeeze(0).numpy()

    def denoise(self, z_t: np.ndarray, t: float, mask, masked_latent,
                prompt_tag: str, guidance: float) -> np.ndarray:
        """Classifier-free-guided prediction: cond + g * (cond - uncond)."""
        if prompt_tag not in PROMPTS:
            raise ValueError(f"unknown prompt tag {prompt_tag!r}")
        eps_cond = self.eps(z_t, t, mask, masked_latent, prompt_tag)
        if guidance == 0.0:
            return eps_cond
        eps_uncond = self.eps(z_t, t, mask, masked_latent, None)
        return eps_cond + guidance * (eps_cond - eps_uncond)

    def inpaint(self, image: np.ndarray, mask: np.ndarray, t_start: float,
                steps: int, prompt_tag: str, guidance: float,
                rng: np.random.Generator) -> np.ndarray:
        """Noise the masked image to t_start, then DDIM back to t = 0."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        z0 = self.encode_image(image)
        k = self.cfg.latent_down
        m_img = torch.as_tensor(mask, dtype=torch.float32)
        m_lat = F.max_pool2d(m_img.unsqueeze(0), k).squeeze(0).numpy()
        masked_latent = self.encode_image(image * (1.0 - mask[..., None]))
        eps0 = rng.standard_normal(z0.shape).astype(np.float32)
        a, s = alpha_sigma(t_start)
        z = a * z0 + s * eps0
        ts = np.linspace(t_start, 0.0, steps + 1)
        for t_cur, t_next in zip(ts[:-1], ts[1:]):
            eps_hat = self.denoise(z, float(t_cur), m_lat, masked_latent, prompt_tag, guidance)
            a_c, s_c = alpha_sigma(float(t_cur))
            z0_hat = (z - s_c * eps_hat) / max(a_c, 1e-8)
            a_n, s_n = alpha_sigma(float(t_next))
            z = a_n * z0_hat + s_n * eps_hat
        return self.decode_latent(z)


# ---------------------------------------------------------------------------
# heuristic monocular depth


def monodepth(image: np.ndarray) -> np.ndarray:
    """Deterministic relative-depth heuristic: dark, low-contrast regions read
    as far; a smoothed luminance/gradient blend in [0, 1]."""
    lum = image @ np.array([0.299, 0.587, 0.114])
    gy, gx = np.gradient(lum)
    contrast = np.sqrt(gx * gx + gy * gy)
    raw = 1.0 - 0.7 * lum - 0.3 * (contrast / (contrast.max() + 1e-8))
    t = torch.as_tensor(raw, dtype=torch.float32).reshape(1, 1, *raw.shape)
    smooth = F.avg_pool2d(F.pad(t, (2, 2, 2, 2), mode="replicate"), 5, stride=1)
    out = smooth.squeeze().numpy().astype(np.float64)
    lo, hi = float(out.min()), float(out.max())
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)
