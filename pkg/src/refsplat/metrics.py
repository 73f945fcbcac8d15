"""Masked-region image metrics: L1, PSNR, SSIM inside a dilated mask bbox."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .scene import InvalidInputError

PSNR_CAP = 100.0


def mask_bbox(mask: np.ndarray, dilation: float = 0.10):
    """Bounding box of the nonzero mask region, dilated by `dilation` per
    side (fraction of the box's extent) and clamped to the image. Returns
    (y0, y1, x0, x1) half-open, or None for an empty mask."""
    ys, xs = np.nonzero(np.asarray(mask) > 0.5)
    if ys.size == 0:
        return None
    h, w = mask.shape
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    dy = int(np.ceil(dilation * (y1 - y0)))
    dx = int(np.ceil(dilation * (x1 - x0)))
    return (max(0, y0 - dy), min(h, y1 + dy), max(0, x0 - dx), min(w, x1 + dx))


def _ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Mean Gaussian-windowed SSIM over RGB channels."""
    half = window // 2
    ax = np.arange(window) - half
    k1 = np.exp(-(ax**2) / (2 * sigma**2))
    k1 /= k1.sum()
    kernel = np.outer(k1, k1)

    def blur(img):
        return np.stack(
            [ndimage.convolve(img[..., c], kernel, mode="reflect") for c in range(img.shape[-1])],
            axis=-1,
        )

    c1, c2 = 0.01**2, 0.03**2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MaskedMetrics:
    l1: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    @property
    def mean_l1(self):
        return float(np.mean(self.l1)) if self.l1 else float("nan")

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")


def eval_masked(pred_images, gt_images, masks, dilation: float = 0.10) -> MaskedMetrics:
    """Per-view L1/PSNR/SSIM restricted to each mask's dilated bounding box.

    Views with empty masks are skipped. PSNR is capped at 100 dB so exact
    matches produce a finite sentinel.
    """
    if not (len(pred_images) == len(gt_images) == len(masks)):
        raise InvalidInputError("pred/gt/mask lists must have equal length")
    result = MaskedMetrics()
    for pred, gt, mask in zip(pred_images, gt_images, masks):
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        if pred.shape != gt.shape:
            raise InvalidInputError("pred and gt image shapes differ")
        box = mask_bbox(mask, dilation)
        if box is None:
            continue
        y0, y1, x0, x1 = box
        p = pred[y0:y1, x0:x1]
        g = gt[y0:y1, x0:x1]
        result.l1.append(float(np.mean(np.abs(p - g))))
        mse = float(np.mean((p - g) ** 2))
        psnr = PSNR_CAP if mse == 0.0 else min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))
        result.psnr.append(float(psnr))
        result.ssim.append(_ssim(p, g))
    return result
