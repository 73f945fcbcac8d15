"""Forward splatting (color / depth / alpha / semantic) and the hand-derived
backward pass.

Rendering is particle-sorted, front-to-back alpha compositing. The engine is
vectorized over pixel blocks; per-pixel arithmetic is independent across
pixels, so results are bitwise identical to a per-pixel loop that composites
in the same global (depth, index) order with the same footprint rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import (
    CameraView,
    GaussianScene,
    Label,
    quat_scale_to_cov,
    quat_to_rotmat,
    sh_basis,
    sh_basis_grad,
    sigmoid,
    DC_OFFSET,
)

ALPHA_CLAMP = 0.999
T_TERMINATE = 1e-4
DEPTH_ALPHA_MIN = 1e-4
_BLOCK_BUDGET = 1 << 21  # max pixel*particle entries held at once


@dataclass
class RasterSettings:
    near: float = 1e-3
    cov_floor: float = 0.3  # px^2 added to the 2D covariance diagonal
    cull_sigma: float | None = 3.0  # footprint radius in sigmas; None = no cutoff
    eps_contrib: float = 1e-3  # compositing-weight threshold for tallies


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (h, w, 3)
    depth: np.ndarray  # (h, w), alpha-normalized expected depth, 0 where alpha ~ 0
    alpha: np.ndarray  # (h, w)
    semantic: np.ndarray  # (h, w), composited mask-label values
    per_pixel_contributor_counts: np.ndarray | None = None


@dataclass
class ContributionTally:
    masked_count: np.ndarray  # (n,) int64
    unmasked_count: np.ndarray  # (n,) int64

    def __iadd__(self, other: "ContributionTally"):
        self.masked_count += other.masked_count
        self.unmasked_count += other.unmasked_count
        return self


@dataclass
class ParticleGrads:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    @staticmethod
    def zeros(n: int) -> "ParticleGrads":
        return ParticleGrads(
            positions=np.zeros((n, 3)),
            log_scales=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)),
            opacity_logits=np.zeros(n),
            sh_coeffs=np.zeros((n, 3, 16)),
        )

    def fields(self):
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_logits": self.opacity_logits,
            "sh_coeffs": self.sh_coeffs,
        }

    def add_scaled(self, other: "ParticleGrads", scale: float) -> "ParticleGrads":
        for k, v in self.fields().items():
            v += scale * other.fields()[k]
        return self


@dataclass
class ProjectedSplats:
    """Visible particles after perspective projection, sorted by (depth, index)."""

    idx: np.ndarray  # (m,) indices into the scene
    mean2d: np.ndarray  # (m, 2)
    cov2d: np.ndarray  # (m, 2, 2)
    inv_cov2d: np.ndarray  # (m, 2, 2)
    depth: np.ndarray  # (m,)
    radius: np.ndarray  # (m,) footprint radius in px (inf when uncapped)
    p_cam: np.ndarray  # (m, 3)
    J: np.ndarray  # (m, 2, 3)
    colors: np.ndarray  # (m, 3) view-dependent rgb
    sig_o: np.ndarray  # (m,) sigmoid opacity
    sem_value: np.ndarray  # (m,) 1.0 for Masked


def _projection_jacobian(p_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    X, Y, Z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    J = np.zeros((p_cam.shape[0], 2, 3))
    J[:, 0, 0] = fx / Z
    J[:, 0, 2] = -fx * X / Z**2
    J[:, 1, 1] = fy / Z
    J[:, 1, 2] = -fy * Y / Z**2
    return J


def project_scene(scene: GaussianScene, camera: CameraView, settings: RasterSettings | None = None) -> ProjectedSplats:
    """Project all particles; cull those behind the near plane; sort front-to-back."""
    st = settings or RasterSettings()
    Rc, tc = camera.rotation, camera.translation
    p_cam = scene.positions @ Rc.T + tc
    keep = p_cam[:, 2] > st.near
    idx = np.flatnonzero(keep)
    p_cam = p_cam[idx]
    # stable (depth, index) key: argsort of depth with stable kind keeps index order on ties
    order = np.argsort(p_cam[:, 2], kind="stable")
    idx = idx[order]
    p_cam = p_cam[order]

    mean2d = np.stack(
        [
            camera.fx * p_cam[:, 0] / p_cam[:, 2] + camera.cx,
            camera.fy * p_cam[:, 1] / p_cam[:, 2] + camera.cy,
        ],
        axis=-1,
    )
    J = _projection_jacobian(p_cam, camera.fx, camera.fy)
    cov_world = quat_scale_to_cov(scene.rotations[idx], scene.log_scales[idx])
    cov_cam = np.einsum("ij,mjk,lk->mil", Rc, cov_world, Rc)
    cov2d = np.einsum("mij,mjk,mlk->mil", J, cov_cam, J)
    cov2d[:, 0, 0] += st.cov_floor
    cov2d[:, 1, 1] += st.cov_floor
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    inv = np.empty_like(cov2d)
    inv[:, 0, 0] = cov2d[:, 1, 1] / det
    inv[:, 1, 1] = cov2d[:, 0, 0] / det
    inv[:, 0, 1] = -cov2d[:, 0, 1] / det
    inv[:, 1, 0] = -cov2d[:, 1, 0] / det

    if st.cull_sigma is None:
        radius = np.full(len(idx), np.inf)
    else:
        tr = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
        lam_max = tr + np.sqrt(np.maximum(tr * tr - det, 0.0))
        radius = st.cull_sigma * np.sqrt(lam_max)

    view_dir = scene.positions[idx] - camera.center
    view_dir = view_dir / np.linalg.norm(view_dir, axis=-1, keepdims=True)
    pre = np.einsum("mcj,mj->mc", scene.sh_coeffs[idx], sh_basis(view_dir)) + DC_OFFSET
    colors = np.maximum(pre, 0.0)

    return ProjectedSplats(
        idx=idx,
        mean2d=mean2d,
        cov2d=cov2d,
        inv_cov2d=inv,
        depth=p_cam[:, 2],
        radius=radius,
        p_cam=p_cam,
        J=J,
        colors=colors,
        sig_o=sigmoid(scene.opacity_logits[idx]),
        sem_value=(scene.labels[idx] == Label.MASKED).astype(float),
    )


def project(particle, camera: CameraView, settings: RasterSettings | None = None):
    """Project a single particle; returns (mean2d, cov2d, depth) or None if culled."""
    from .scene import GaussianScene

    scene = GaussianScene.from_particles([particle])
    proj = project_scene(scene, camera, settings)
    if len(proj.idx) == 0:
        return None
    return proj.mean2d[0], proj.cov2d[0], float(proj.depth[0])


def _pixel_blocks(height: int, width: int, m: int):
    """Yield (row0, row1) chunks keeping row-span * width * particles bounded."""
    rows = max(1, int(_BLOCK_BUDGET // max(1, width * m)))
    for r0 in range(0, height, rows):
        yield r0, min(r0 + rows, height)


def _block_weights(proj: ProjectedSplats, px: np.ndarray, py: np.ndarray, sub: np.ndarray):
    """Per-(pixel, particle) compositing quantities for one pixel block.

    Returns d, q, G, a, T (transmittance before each particle), active mask,
    and T_fin (transmittance after the last composited particle).
    """
    mean = proj.mean2d[sub]
    inv = proj.inv_cov2d[sub]
    d0 = px[:, None] - mean[None, :, 0]
    d1 = py[:, None] - mean[None, :, 1]
    # expanded quadratic form; grouping fixed so any reference loop using the
    # same expression matches bitwise
    power = -0.5 * (
        d0 * d0 * inv[None, :, 0, 0]
        + d1 * d1 * inv[None, :, 1, 1]
        + 2.0 * d0 * d1 * inv[None, :, 0, 1]
    )
    G = np.exp(power)
    r = proj.radius[sub]
    inside = (np.abs(d0) <= r[None, :]) & (np.abs(d1) <= r[None, :])
    G = np.where(inside, G, 0.0)
    a = np.minimum(proj.sig_o[sub][None, :] * G, ALPHA_CLAMP)
    Tcum = np.cumprod(1.0 - a, axis=1)
    T = np.concatenate([np.ones((a.shape[0], 1)), Tcum[:, :-1]], axis=1)
    # transmittance is nonincreasing, so `active` is a per-pixel prefix
    active = T >= T_TERMINATE
    n_active = active.sum(axis=1)
    M = a.shape[1]
    T_fin = np.where(
        n_active == M,
        Tcum[:, -1],
        T[np.arange(a.shape[0]), np.minimum(n_active, M - 1)],
    )
    return d0, d1, G, a, T, active, T_fin


def _sequential_reduce(w, colors, depths, sems):
    """Left-to-right reductions over the particle axis, bitwise equal to a
    sequential per-pixel compositing loop."""
    P, M = w.shape
    if M <= 32:
        crgb = np.zeros((P, 3))
        draw = np.zeros(P)
        A = np.zeros(P)
        sem = np.zeros(P)
        for k in range(M):
            wk = w[:, k]
            crgb = crgb + wk[:, None] * colors[k]
            draw = draw + wk * depths[k]
            A = A + wk
            sem = sem + wk * sems[k]
        return crgb, draw, A, sem
    crgb = np.cumsum(w[:, :, None] * colors[None], axis=1)[:, -1, :]
    draw = np.cumsum(w * depths[None, :], axis=1)[:, -1]
    A = np.cumsum(w, axis=1)[:, -1]
    sem = np.cumsum(w * sems[None, :], axis=1)[:, -1]
    return crgb, draw, A, sem


def _select_block_particles(proj: ProjectedSplats, y0: float, y1: float, width: int) -> np.ndarray:
    my = proj.mean2d[:, 1]
    mx = proj.mean2d[:, 0]
    r = proj.radius
    keep = (my + r >= y0) & (my - r <= y1) & (mx + r >= 0.5) & (mx - r <= width - 0.5)
    return np.flatnonzero(keep)


def render(
    scene: GaussianScene,
    camera: CameraView,
    settings: RasterSettings | None = None,
    compute_counts: bool = False,
) -> RenderOutput:
    """Front-to-back alpha compositing of the scene into rgb/depth/alpha/semantic."""
    st = settings or RasterSettings()
    H, W = camera.height, camera.width
    bg = scene.background_color
    rgb = np.tile(bg, (H, W, 1))
    depth = np.zeros((H, W))
    alpha = np.zeros((H, W))
    semantic = np.zeros((H, W))
    counts = np.zeros((H, W), dtype=np.int64) if compute_counts else None

    proj = project_scene(scene, camera, st)
    m = len(proj.idx)
    if m == 0:
        return RenderOutput(rgb, depth, alpha, semantic, counts)

    for r0, r1 in _pixel_blocks(H, W, m):
        ys, xs = np.mgrid[r0:r1, 0:W]
        px = xs.ravel() + 0.5
        py = ys.ravel() + 0.5
        sub = _select_block_particles(proj, r0 + 0.5, r1 - 0.5, W)
        if len(sub) == 0:
            continue
        _, _, _, a, T, active, T_fin = _block_weights(proj, px, py, sub)
        w = a * T * active
        crgb, draw, A, sem = _sequential_reduce(
            w, proj.colors[sub], proj.depth[sub], proj.sem_value[sub]
        )
        shape = (r1 - r0, W)
        rgb[r0:r1] = (crgb + T_fin[:, None] * bg[None, :]).reshape(shape + (3,))
        alpha[r0:r1] = A.reshape(shape)
        safe = A > DEPTH_ALPHA_MIN
        depth[r0:r1] = np.where(safe, draw / np.where(safe, A, 1.0), 0.0).reshape(shape)
        semantic[r0:r1] = sem.reshape(shape)
        if counts is not None:
            counts[r0:r1] = (w > st.eps_contrib).sum(axis=1).reshape(shape)
    return RenderOutput(rgb, depth, alpha, semantic, counts)


def render_backward(
    scene: GaussianScene,
    camera: CameraView,
    upstream: RenderOutput,
    settings: RasterSettings | None = None,
) -> ParticleGrads:
    """Analytic per-particle gradients for upstream gradients on the render
    channels. Culled particles receive exactly zero."""
    st = settings or RasterSettings()
    H, W = camera.height, camera.width
    bg = scene.background_color
    grads = ParticleGrads.zeros(len(scene))
    proj = project_scene(scene, camera, st)
    m = len(proj.idx)
    if m == 0:
        return grads

    g_rgb_img = upstream.rgb.reshape(H * W, 3)
    g_depth_img = upstream.depth.reshape(H * W)
    g_alpha_img = upstream.alpha.reshape(H * W)
    g_sem_img = upstream.semantic.reshape(H * W)

    # accumulators over projected (visible, sorted) particles
    g_mean = np.zeros((m, 2))
    g_cov = np.zeros((m, 2, 2))
    g_opacity = np.zeros(m)
    g_color = np.zeros((m, 3))
    g_zdirect = np.zeros(m)

    for r0, r1 in _pixel_blocks(H, W, m):
        ys, xs = np.mgrid[r0:r1, 0:W]
        px = xs.ravel() + 0.5
        py = ys.ravel() + 0.5
        flat = (ys * W + xs).ravel()
        sub = _select_block_particles(proj, r0 + 0.5, r1 - 0.5, W)
        if len(sub) == 0:
            continue
        d0, d1, G, a, T, active, T_fin = _block_weights(proj, px, py, sub)
        inv = proj.inv_cov2d[sub]
        q = np.stack(
            [
                inv[None, :, 0, 0] * d0 + inv[None, :, 0, 1] * d1,
                inv[None, :, 1, 0] * d0 + inv[None, :, 1, 1] * d1,
            ],
            axis=-1,
        )
        w = a * T * active

        colors = proj.colors[sub]
        zvals = proj.depth[sub]
        sem = proj.sem_value[sub]
        sig_o = proj.sig_o[sub]

        g_rgb = g_rgb_img[flat]
        g_dep = g_depth_img[flat]
        g_alp = g_alpha_img[flat]
        g_se = g_sem_img[flat]

        A = w.sum(axis=1)
        draw = w @ zvals
        safe = A > DEPTH_ALPHA_MIN
        A_safe = np.where(safe, A, 1.0)
        g_draw = np.where(safe, g_dep / A_safe, 0.0)
        g_A = g_alp + np.where(safe, -g_dep * draw / A_safe**2, 0.0)

        # per-channel suffix sums S_i = sum_{j>i} w_j v_j (+ background term for rgb)
        wv_rgb = w[:, :, None] * colors[None, :, :]
        cum_rgb = np.cumsum(wv_rgb, axis=1)
        S_rgb = cum_rgb[:, -1:, :] - cum_rgb + T_fin[:, None, None] * bg[None, None, :]
        wv_d = w * zvals[None, :]
        cum_d = np.cumsum(wv_d, axis=1)
        S_d = cum_d[:, -1:] - cum_d
        cum_w = np.cumsum(w, axis=1)
        S_w = cum_w[:, -1:] - cum_w
        wv_s = w * sem[None, :]
        cum_s = np.cumsum(wv_s, axis=1)
        S_s = cum_s[:, -1:] - cum_s

        one_m_a = 1.0 - a
        grad_a = (
            np.einsum("pc,pm,mc->pm", g_rgb, T, colors)
            - np.einsum("pc,pmc->pm", g_rgb, S_rgb) / one_m_a
            + g_draw[:, None] * (T * zvals[None, :] - S_d / one_m_a)
            + g_A[:, None] * (T - S_w / one_m_a)
            + g_se[:, None] * (T * sem[None, :] - S_s / one_m_a)
        )
        grad_a = np.where(active, grad_a, 0.0)

        unclamped = sig_o[None, :] * G < ALPHA_CLAMP
        gG = np.where(unclamped, grad_a * sig_o[None, :], 0.0)
        g_opacity[sub] += np.einsum(
            "pm,pm->m", np.where(unclamped, grad_a, 0.0), G
        ) * (sig_o * (1.0 - sig_o))
        gGG = gG * G
        g_mean[sub] += np.einsum("pm,pmi->mi", gGG, q)
        g_cov[sub, 0, 0] += 0.5 * np.einsum("pm,pm->m", gGG, q[..., 0] * q[..., 0])
        g_cov[sub, 1, 1] += 0.5 * np.einsum("pm,pm->m", gGG, q[..., 1] * q[..., 1])
        off = 0.5 * np.einsum("pm,pm->m", gGG, q[..., 0] * q[..., 1])
        g_cov[sub, 0, 1] += off
        g_cov[sub, 1, 0] += off

        g_color[sub] += np.einsum("pm,pc->mc", w, g_rgb)
        g_zdirect[sub] += w.T @ g_draw

    _chain_to_particles(scene, camera, proj, g_mean, g_cov, g_opacity, g_color, g_zdirect, grads)
    return grads


def _quat_rotmat_jacobian(qn: np.ndarray) -> np.ndarray:
    """d R / d q_hat for normalized quaternions; (m, 4, 3, 3)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    m = qn.shape[0]
    Jq = np.zeros((m, 4, 3, 3))
    zero = np.zeros_like(w)
    Jq[:, 0] = 2.0 * np.stack(
        [
            np.stack([zero, -z, y], -1),
            np.stack([z, zero, -x], -1),
            np.stack([-y, x, zero], -1),
        ],
        axis=1,
    )
    Jq[:, 1] = 2.0 * np.stack(
        [
            np.stack([zero, y, z], -1),
            np.stack([y, -2 * x, -w], -1),
            np.stack([z, w, -2 * x], -1),
        ],
        axis=1,
    )
    Jq[:, 2] = 2.0 * np.stack(
        [
            np.stack([-2 * y, x, w], -1),
            np.stack([x, zero, z], -1),
            np.stack([-w, z, -2 * y], -1),
        ],
        axis=1,
    )
    Jq[:, 3] = 2.0 * np.stack(
        [
            np.stack([-2 * z, -w, x], -1),
            np.stack([w, -2 * z, y], -1),
            np.stack([x, y, zero], -1),
        ],
        axis=1,
    )
    return Jq


def _chain_to_particles(scene, camera, proj: ProjectedSplats, g_mean, g_cov, g_opacity, g_color, g_zdirect, grads: ParticleGrads):
    """Chain screen-space gradients back to particle parameters."""
    idx = proj.idx
    if len(idx) == 0:
        return
    Rc = camera.rotation
    fx, fy = camera.fx, camera.fy
    X, Y, Z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    J = proj.J

    ls = scene.log_scales[idx]
    q_raw = scene.rotations[idx]
    qn = q_raw / np.linalg.norm(q_raw, axis=-1, keepdims=True)
    Rq = quat_to_rotmat(qn)
    cov_world = quat_scale_to_cov(qn, ls)
    cov_cam = np.einsum("ij,mjk,lk->mil", Rc, cov_world, Rc)

    g_pcam = np.einsum("mkj,mk->mj", J, g_mean)
    g_pcam[:, 2] += g_zdirect

    g_Mcam = np.einsum("mki,mkl,mlj->mij", J, g_cov, J)
    g_J = 2.0 * np.einsum("mik,mkl,mlj->mij", g_cov, J, cov_cam)
    g_pcam[:, 0] += g_J[:, 0, 2] * (-fx / Z**2)
    g_pcam[:, 1] += g_J[:, 1, 2] * (-fy / Z**2)
    g_pcam[:, 2] += (
        g_J[:, 0, 0] * (-fx / Z**2)
        + g_J[:, 1, 1] * (-fy / Z**2)
        + g_J[:, 0, 2] * (2.0 * fx * X / Z**3)
        + g_J[:, 1, 2] * (2.0 * fy * Y / Z**3)
    )

    g_cov_world = np.einsum("ji,mjk,kl->mil", Rc, g_Mcam, Rc)

    e2s = np.exp(2.0 * ls)
    grads.log_scales[idx] += 2.0 * e2s * np.einsum("mik,mij,mjk->mk", Rq, g_cov_world, Rq)
    g_Rq = 2.0 * np.einsum("mij,mjk->mik", g_cov_world, Rq) * e2s[:, None, :]

    Jq = _quat_rotmat_jacobian(qn)
    g_qn = np.einsum("meij,mij->me", Jq, g_Rq)
    qnorm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    g_q = (g_qn - qn * np.einsum("me,me->m", g_qn, qn)[:, None]) / qnorm
    grads.rotations[idx] += g_q

    grads.positions[idx] += g_pcam @ Rc  # R_c^T applied row-wise
    grads.opacity_logits[idx] += g_opacity

    # color: clamp mask, SH coefficients, and view-direction dependence
    view = scene.positions[idx] - camera.center
    dist = np.linalg.norm(view, axis=-1, keepdims=True)
    v = view / dist
    basis = sh_basis(v)
    pre = np.einsum("mcj,mj->mc", scene.sh_coeffs[idx], basis) + DC_OFFSET
    live = (pre > 0.0).astype(float)
    g_pre = g_color * live
    grads.sh_coeffs[idx] += g_pre[:, :, None] * basis[:, None, :]
    bg = sh_basis_grad(v)
    g_v = np.einsum("mc,mcj,mjk->mk", g_pre, scene.sh_coeffs[idx], bg)
    g_view = (g_v - v * np.einsum("mk,mk->m", g_v, v)[:, None]) / dist
    grads.positions[idx] += g_view


def accumulate_contributions(
    scene: GaussianScene,
    views: list[CameraView],
    settings: RasterSettings | None = None,
) -> ContributionTally:
    """Count, per particle, pixels where its compositing weight exceeds the
    contribution threshold, split by the pixel's mask value."""
    st = settings or RasterSettings()
    n = len(scene)
    tally = ContributionTally(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))
    for view in views:
        if view.mask is None:
            raise ValueError("accumulate_contributions requires masks on all views")
        proj = project_scene(scene, view, st)
        m = len(proj.idx)
        if m == 0:
            continue
        mask = view.mask.reshape(-1).astype(bool)
        H, W = view.height, view.width
        for r0, r1 in _pixel_blocks(H, W, m):
            ys, xs = np.mgrid[r0:r1, 0:W]
            px = xs.ravel() + 0.5
            py = ys.ravel() + 0.5
            flat = (ys * W + xs).ravel()
            sub = _select_block_particles(proj, r0 + 0.5, r1 - 0.5, W)
            if len(sub) == 0:
                continue
            _, _, _, a, T, active, _ = _block_weights(proj, px, py, sub)
            w = a * T * active
            contributes = w > st.eps_contrib
            pm = mask[flat]
            tally.masked_count[proj.idx[sub]] += contributes[pm].sum(axis=0)
            tally.unmasked_count[proj.idx[sub]] += contributes[~pm].sum(axis=0)
    return tally
