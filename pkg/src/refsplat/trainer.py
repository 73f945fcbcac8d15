"""End-to-end optimization: masked reconstruction plus distillation, depth,
and adversarial regularizers, with per-source gradient routing, label-aware
densification, and per-group Adam."""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dataclass_fields

import numpy as np
from scipy.ndimage import convolve

from .adversarial import AdamState, Discriminator, adam_update, adv_step, scatter_patch_grads
from .depth_reg import DepthConfig, DepthOracle, depth_loss
from .guidance import DenoisePrior, SdsConfig, multiscale_sds
from .masks import label_gaussians
from .rasterizer import (
    ParticleGrads,
    RasterSettings,
    RenderOutput,
    accumulate_contributions,
    render,
    render_backward,
)
from .reference import ReferenceView
from .scene import CameraView, GaussianScene, InvalidInputError, Label, normalize_rotations

MODES = ("inpaint", "insert", "outpaint", "sparse_recon")
GRAD_SOURCES = ("reconstruction", "SDS", "depth", "adversarial")

LOG_COLUMNS = (
    "iteration",
    "L_rec",
    "L_SDS_global",
    "L_SDS_local",
    "L_depth",
    "L_adv_G",
    "L_adv_D",
    "particle_count",
)


class TrainingDiverged(RuntimeError):
    """Raised after too many consecutive non-finite iterations."""


@dataclass
class TrainConfig:
    mode: str = "inpaint"
    iterations: int = 200
    seed: int = 0
    # dataset root for the CLI ("" = procedurally generated test scene)
    data_dir: str = ""
    # loss weights
    lambda_rec: float = 1.0
    lambda_sds: float = 0.001
    lambda_depth: float = 0.0625
    lambda_adv: float = 0.03
    # reconstruction mix
    l1_weight: float = 0.8
    dssim_weight: float = 0.2
    ssim_window: int = 11
    # distillation
    guidance: float = 7.5
    t_min: float = 0.02
    t_max: float = 0.98
    native_resolution: int = 64
    n_local_patches: int = 2
    # depth regularizer
    depth_interval: int = 8
    depth_denoise_steps: int = 10
    # adversarial regularizer
    n_patches: int = 64
    patch_size: int = 64
    lambda_gp: float = 1.0
    gp_on: str = "fake"
    disc_lr: float = 2e-3
    disc_beta1: float = 0.0
    disc_beta2: float = 0.99
    # thresholds
    tau_mask: float = 1.0
    tau_prime: float = 0.3
    # optimizer
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    # densification
    densify_interval: int = 0  # 0 disables
    densify_start: int = 50
    densify_grad_threshold: float = 2e-4
    sds_threshold_factor: float = 10.0
    densify_scale_threshold: float = 0.05
    prune_opacity: float = 0.005
    max_rollbacks: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("lambda_rec", "lambda_sds", "lambda_depth", "lambda_adv"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be nonnegative")
        for name in ("iterations", "depth_interval"):
            if getattr(self, name) < 0 or (name == "depth_interval" and self.depth_interval < 1):
                raise InvalidInputError(f"{name} out of range")


# ---------------------------------------------------------------------------
# gradient routing


def route_gradients(grads: ParticleGrads, labels: np.ndarray, source: str) -> ParticleGrads:
    """Zero out gradient rows according to the loss source.

    Reconstruction updates only Unmasked particles; SDS/depth/adversarial
    update only Masked particles; the adversarial source additionally touches
    only the spherical-harmonics coefficients."""
    if source not in GRAD_SOURCES:
        raise InvalidInputError(f"unknown gradient source {source!r}")
    masked = np.asarray(labels) == Label.MASKED
    block = masked if source == "reconstruction" else ~masked
    for name, arr in grads.fields().items():
        arr[block] = 0.0
        if source == "adversarial" and name != "sh_coeffs":
            arr[:] = 0.0
    return grads


# ---------------------------------------------------------------------------
# reconstruction loss: 0.8 L1 + 0.2 D-SSIM, with analytic image gradient


def _gaussian_kernel(window: int, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(window) - (window - 1) / 2.0
    k = np.exp(-(x**2) / (2 * sigma**2))
    k /= k.sum()
    return np.outer(k, k)


def _conv(img: np.ndarray, kern: np.ndarray) -> np.ndarray:
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = convolve(img[:, :, c], kern, mode="constant", cval=0.0)
    return out


def recon_loss(
    pred: np.ndarray,
    gt: np.ndarray,
    pixel_mask: np.ndarray,
    l1_weight: float = 0.8,
    dssim_weight: float = 0.2,
    window: int = 11,
) -> tuple[float, np.ndarray]:
    """Masked L1 + D-SSIM with its gradient w.r.t. ``pred``.

    ``pixel_mask`` selects the supervised pixels (True = supervised). Both
    terms average over those pixels only; the SSIM statistics themselves use
    the full image with zero padding, matching the gradient exactly.
    """
    mask = np.asarray(pixel_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred)
    m3 = mask[:, :, None]
    diff = pred - gt
    l1 = float(np.abs(diff[mask]).mean())
    grad = np.where(m3, np.sign(diff), 0.0) * (l1_weight / (n * pred.shape[2]))

    C1, C2 = 0.01**2, 0.03**2
    kern = _gaussian_kernel(window)
    mu_x = _conv(pred, kern)
    mu_y = _conv(gt, kern)
    t_xx = _conv(pred * pred, kern)
    t_yy = _conv(gt * gt, kern)
    t_xy = _conv(pred * gt, kern)
    var_x = t_xx - mu_x**2
    var_y = t_yy - mu_y**2
    cov = t_xy - mu_x * mu_y
    A1 = 2 * mu_x * mu_y + C1
    A2 = 2 * cov + C2
    B1 = mu_x**2 + mu_y**2 + C1
    B2 = var_x + var_y + C2
    D = B1 * B2
    s = (A1 * A2) / D
    ssim = float(s[mask].mean())
    dssim = (1.0 - ssim) / 2.0

    # upstream on the ssim map: d dssim / d s = -1/(2 n_ch) on supervised px
    u = np.where(m3, -dssim_weight / (2.0 * n * pred.shape[2]), 0.0)
    ds_dm1 = 2 * mu_y * (A2 - A1) / D - 2 * mu_x * s * (1.0 / B1 - 1.0 / B2)
    ds_dt1 = -s / B2
    ds_dt12 = 2 * A1 / D
    grad += _conv(u * ds_dm1, kern)
    grad += 2 * pred * _conv(u * ds_dt1, kern)
    grad += gt * _conv(u * ds_dt12, kern)
    return l1_weight * l1 + dssim_weight * dssim, grad


# ---------------------------------------------------------------------------
# per-group Adam over particle arrays


class SceneAdam:
    GROUPS = ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs")

    def __init__(self, cfg: TrainConfig, n: int):
        self.cfg = cfg
        self.m = {}
        self.v = {}
        self.step_count = 0
        for g in self.GROUPS:
            self.m[g] = None  # lazily shaped on first step
            self.v[g] = None

    def _lr(self, group: str, iteration: int) -> float:
        c = self.cfg
        if group == "positions":
            if c.iterations <= 1:
                return c.lr_position
            frac = iteration / max(1, c.iterations - 1)
            return float(c.lr_position * (c.lr_position_final / c.lr_position) ** frac)
        return {
            "log_scales": c.lr_scale,
            "rotations": c.lr_rotation,
            "opacity_logits": c.lr_opacity,
            "sh_coeffs": c.lr_sh,
        }[group]

    def step(self, scene: GaussianScene, grads: ParticleGrads, iteration: int) -> np.ndarray:
        """Descend; returns the indices of particles whose rotation moved."""
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        arrays = {
            "positions": scene.positions,
            "log_scales": scene.log_scales,
            "rotations": scene.rotations,
            "opacity_logits": scene.opacity_logits,
            "sh_coeffs": scene.sh_coeffs,
        }
        gmap = grads.fields()
        rot_changed = None
        for g in self.GROUPS:
            p, grad = arrays[g], gmap[g]
            if self.m[g] is None:
                self.m[g] = np.zeros_like(p)
                self.v[g] = np.zeros_like(p)
            self.m[g] = c.adam_beta1 * self.m[g] + (1 - c.adam_beta1) * grad
            self.v[g] = c.adam_beta2 * self.v[g] + (1 - c.adam_beta2) * grad * grad
            m_hat = self.m[g] / (1 - c.adam_beta1**t)
            v_hat = self.v[g] / (1 - c.adam_beta2**t)
            update = self._lr(g, iteration) * m_hat / (np.sqrt(v_hat) + 1e-8)
            # rows with exactly zero gradient history stay bitwise untouched
            touched = np.any(grad != 0.0, axis=tuple(range(1, p.ndim))) | np.any(
                self.m[g] != 0.0, axis=tuple(range(1, p.ndim))
            )
            p[touched] -= update[touched]
            if g == "rotations":
                rot_changed = np.flatnonzero(touched)
        return rot_changed if rot_changed is not None else np.array([], dtype=int)

    def subset(self, idx: np.ndarray) -> None:
        for g in self.GROUPS:
            if self.m[g] is not None:
                self.m[g] = self.m[g][idx]
                self.v[g] = self.v[g][idx]

    def append_zeros(self, k: int) -> None:
        for g in self.GROUPS:
            if self.m[g] is not None:
                pad = np.zeros((k,) + self.m[g].shape[1:])
                self.m[g] = np.concatenate([self.m[g], pad])
                self.v[g] = np.concatenate([self.v[g], pad])


# ---------------------------------------------------------------------------
# densification


@dataclass
class GradStats:
    """Running mean of positional-gradient norms, kept per loss source."""

    recon_sum: np.ndarray
    sds_sum: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, n: int) -> "GradStats":
        return cls(np.zeros(n), np.zeros(n))

    def accumulate(self, recon_grads: ParticleGrads, sds_grads: ParticleGrads) -> None:
        self.recon_sum += np.linalg.norm(recon_grads.positions, axis=-1)
        self.sds_sum += np.linalg.norm(sds_grads.positions, axis=-1)
        self.count += 1

    def subset(self, idx: np.ndarray) -> None:
        self.recon_sum = self.recon_sum[idx]
        self.sds_sum = self.sds_sum[idx]

    def append_zeros(self, k: int) -> None:
        self.recon_sum = np.concatenate([self.recon_sum, np.zeros(k)])
        self.sds_sum = np.concatenate([self.sds_sum, np.zeros(k)])

    def reset(self) -> None:
        self.recon_sum[:] = 0.0
        self.sds_sum[:] = 0.0
        self.count = 0


def densify_and_prune(
    scene: GaussianScene,
    stats: GradStats,
    cfg: TrainConfig,
    rng: np.random.Generator,
    views: list[CameraView] | None = None,
    optimizer: SceneAdam | None = None,
    settings: RasterSettings | None = None,
) -> GaussianScene:
    """Clone/split high-gradient particles (SDS-sourced gradients need a
    threshold ``sds_threshold_factor`` times higher), prune near-transparent
    ones, and re-audit labels; children inherit their parent's label.
    """
    from .scene import concat_scenes

    denom = max(1, stats.count)
    recon_avg = stats.recon_sum / denom
    sds_avg = stats.sds_sum / denom
    hot = (recon_avg > cfg.densify_grad_threshold) | (
        sds_avg > cfg.sds_threshold_factor * cfg.densify_grad_threshold
    )
    keep = scene.opacity_logits > _logit_np(cfg.prune_opacity)
    max_scale = np.exp(scene.log_scales).max(axis=-1)
    clone = hot & keep & (max_scale <= cfg.densify_scale_threshold)
    split = hot & keep & (max_scale > cfg.densify_scale_threshold)

    # split parents are replaced by their two children; everything else
    # pruned only by opacity
    survivor_idx = np.flatnonzero(keep & ~split)
    out = scene.subset(survivor_idx)
    if optimizer is not None:
        optimizer.subset(survivor_idx)
    stats.subset(survivor_idx)

    n_new = 0
    clone_idx = np.flatnonzero(clone)
    if len(clone_idx):
        out = concat_scenes(out, scene.subset(clone_idx))
        n_new += len(clone_idx)
    split_idx = np.flatnonzero(split)
    if len(split_idx):
        parent = scene.subset(split_idx)
        for _ in range(2):
            child = parent.copy()
            child.positions = child.positions + rng.normal(scale=np.exp(child.log_scales))
            child.log_scales = child.log_scales - np.log(1.6)
            out = concat_scenes(out, child)
            n_new += len(child)
    if optimizer is not None and n_new:
        optimizer.append_zeros(n_new)
    stats.append_zeros(n_new)

    # label audit: re-derive labels against the views' masks and delete any
    # particle whose label flipped
    if views is not None and all(v.mask is not None for v in views):
        tally = accumulate_contributions(out, views, settings)
        fresh = label_gaussians(tally, cfg.tau_mask)
        stable = np.flatnonzero(fresh == out.labels)
        if len(stable) < len(out):
            out = out.subset(stable)
            if optimizer is not None:
                optimizer.subset(stable)
            stats.subset(stable)
    stats.reset()
    return out


def _logit_np(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    scene: GaussianScene
    log: list  # rows matching LOG_COLUMNS
    rollbacks: int = 0


def _snapshot(scene: GaussianScene):
    return scene.copy()


def train(
    config: TrainConfig,
    scene: GaussianScene,
    views: list[CameraView],
    reference: ReferenceView | None,
    prior: DenoisePrior | None,
    depth_oracle: DepthOracle | None,
    gt_views: list[CameraView] | None = None,
    settings: RasterSettings | None = None,
    discriminator: Discriminator | None = None,
) -> TrainResult:
    """Optimize the scene for ``config.iterations`` steps.

    Per iteration: reconstruction on a random view's unmasked pixels, the
    multi-scale distillation gradient, the depth loss on schedule, and one
    adversarial round; gradients are routed per source and applied with one
    Adam step per parameter group. Non-finite losses roll the iteration back;
    more than ``max_rollbacks`` consecutive rollbacks aborts.
    """
    cfg = config
    if cfg.iterations == 0:
        return TrainResult(scene, [])
    if not views:
        raise InvalidInputError("need at least one training view")
    for v in views:
        if v.image is None or v.mask is None:
            raise InvalidInputError("training views need images and masks")
    scene = scene.copy()
    rng = np.random.default_rng(cfg.seed)
    optimizer = SceneAdam(cfg, len(scene))
    stats = GradStats.zeros(len(scene))
    sds_cfg = SdsConfig(
        native_resolution=cfg.native_resolution,
        n_local_patches=cfg.n_local_patches,
        guidance=cfg.guidance,
    )
    depth_cfg = DepthConfig(
        denoise_steps=cfg.depth_denoise_steps,
        native_resolution=cfg.native_resolution,
        guidance=cfg.guidance,
    )
    use_sds = cfg.lambda_sds > 0 and prior is not None
    use_depth = cfg.lambda_depth > 0 and prior is not None and depth_oracle is not None
    use_adv = cfg.lambda_adv > 0 and reference is not None
    disc = discriminator
    if use_adv and disc is None:
        disc = Discriminator(cfg.patch_size, rng=np.random.default_rng(cfg.seed + 1))
    disc_state = AdamState()
    gt_ids = {id(v) for v in (gt_views or [])}

    log = []
    rollbacks = 0
    consecutive = 0
    it = 0
    while it < cfg.iterations:
        view = views[int(rng.integers(len(views)))]
        snap = _snapshot(scene)
        row = {k: 0.0 for k in LOG_COLUMNS}
        row["iteration"] = it

        out = render(scene, view, settings)
        total = ParticleGrads.zeros(len(scene))
        recon_routed = ParticleGrads.zeros(len(scene))
        sds_routed = ParticleGrads.zeros(len(scene))

        # reconstruction on unmasked pixels (sparse_recon: all pixels of
        # designated ground-truth views)
        if cfg.lambda_rec > 0:
            if cfg.mode == "sparse_recon" and id(view) in gt_ids:
                pixel_mask = np.ones_like(view.mask, dtype=bool)
            else:
                pixel_mask = view.mask == 0
            l_rec, g_img = recon_loss(
                out.rgb, view.image, pixel_mask,
                cfg.l1_weight, cfg.dssim_weight, cfg.ssim_window,
            )
            row["L_rec"] = l_rec
            zeros = np.zeros(out.depth.shape)
            g = render_backward(
                scene, view,
                RenderOutput(rgb=cfg.lambda_rec * g_img, depth=zeros, alpha=zeros, semantic=zeros),
                settings,
            )
            recon_routed = route_gradients(g, scene.labels, "reconstruction")
            total.add_scaled(recon_routed, 1.0)

        if use_sds and view.mask.any():
            g_sds, diag = multiscale_sds(
                scene, view, view.mask, prior, sds_cfg,
                rng=rng, settings=settings, render_out=out,
            )
            row["L_SDS_global"] = diag["sds_global"]
            row["L_SDS_local"] = diag["sds_local"]
            sds_routed = g_sds  # already zeroed on Unmasked
            total.add_scaled(sds_routed, cfg.lambda_sds)

        if use_depth and it % cfg.depth_interval == cfg.depth_interval - 1 and view.mask.any():
            t_depth = float(rng.uniform(cfg.t_min, cfg.t_max))
            dres = depth_loss(
                scene, view, view.mask, prior, depth_oracle, t_depth,
                config=depth_cfg, rng=rng, settings=settings,
            )
            if not dres.skipped:
                row["L_depth"] = dres.loss
                total.add_scaled(dres.grads, cfg.lambda_depth)

        if use_adv and view.mask.any() and reference.mask.any():
            from .adversarial import sample_patches

            real, _, _ = sample_patches(
                reference.image, reference.image, reference.mask,
                cfg.n_patches, cfg.patch_size, rng,
            )
            _, fake, coords = sample_patches(
                view.image, out.rgb, view.mask, cfg.n_patches, cfg.patch_size, rng
            )
            adv = adv_step(disc, real, fake, cfg.lambda_gp, cfg.gp_on)
            if not adv.skipped:
                row["L_adv_G"] = adv.gen_loss
                row["L_adv_D"] = adv.disc_loss
                disc.set_params(
                    adam_update(
                        disc.params(), adv.param_grads, disc_state,
                        lr=cfg.disc_lr, betas=(cfg.disc_beta1, cfg.disc_beta2),
                    )
                )
                g_img = scatter_patch_grads(
                    adv.fake_pixel_grads, coords, (view.height, view.width)
                )
                zeros = np.zeros((view.height, view.width))
                g = render_backward(
                    scene, view,
                    RenderOutput(rgb=g_img, depth=zeros, alpha=zeros, semantic=zeros),
                    settings,
                )
                g = route_gradients(g, scene.labels, "adversarial")
                total.add_scaled(g, cfg.lambda_adv)

        finite = all(
            np.isfinite(row[k]) for k in ("L_rec", "L_SDS_global", "L_SDS_local", "L_depth")
        ) and all(np.isfinite(a).all() for a in total.fields().values())
        if not finite:
            scene = snap
            rollbacks += 1
            consecutive += 1
            if consecutive > cfg.max_rollbacks:
                raise TrainingDiverged(f"{consecutive} consecutive non-finite iterations")
            it += 1
            continue
        consecutive = 0

        rot_changed = optimizer.step(scene, total, it)
        normalize_rotations(scene, rot_changed)
        stats.accumulate(recon_routed, sds_routed)

        if (
            cfg.densify_interval > 0
            and it >= cfg.densify_start
            and (it + 1) % cfg.densify_interval == 0
        ):
            scene = densify_and_prune(
                scene, stats, cfg, rng, views=views, optimizer=optimizer, settings=settings
            )

        row["particle_count"] = len(scene)
        log.append([row[k] for k in LOG_COLUMNS])
        it += 1
    return TrainResult(scene, log, rollbacks)


def write_loss_log(path, log_rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        w.writerows(log_rows)
