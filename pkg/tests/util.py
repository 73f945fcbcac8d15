"""Shared test helpers: scene/camera generators and the brute-force
per-pixel compositing oracle used to cross-check the vectorized engine."""

import numpy as np

from refsplat.scene import CameraView, GaussianScene, Label, sigmoid, quat_scale_to_cov
from refsplat.rasterizer import (
    ALPHA_CLAMP,
    DEPTH_ALPHA_MIN,
    T_TERMINATE,
    RasterSettings,
    RenderOutput,
    project_scene,
)
from refsplat.scene import sh_eval


def look_at_camera(eye, target, width=32, height=32, fov_deg=60.0, view_id=0):
    """Pinhole camera at `eye` looking toward `target`, up = +y world."""
    eye = np.asarray(eye, dtype=float)
    target = np.asarray(target, dtype=float)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    if abs(np.dot(up, fwd)) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # world->camera rows
    t = -R @ eye
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = t
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return CameraView(
        width=width,
        height=height,
        fx=f,
        fy=f,
        cx=width / 2.0,
        cy=height / 2.0,
        world_to_camera=w2c,
        view_id=view_id,
    )


def random_scene(rng, n=8, min_depth_gap=1e-2, cam=None):
    """Random small scene in front of the camera.

    Depths are rejection-sampled apart so finite differences never cross a
    compositing-order tie; opacity and SH magnitudes are kept moderate so the
    alpha clamp, termination, and color clamp branches stay inactive.
    """
    cam = cam or look_at_camera([0, 0, -4], [0, 0, 0])
    while True:
        positions = rng.uniform([-1.2, -1.2, -1.0], [1.2, 1.2, 1.5], size=(n, 3))
        p_cam = positions @ cam.rotation.T + cam.translation
        z = np.sort(p_cam[:, 2])
        if np.all(np.diff(z) > min_depth_gap):
            break
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = rng.uniform(-1.0, 1.0, size=(n, 3))
    sh[:, :, 1:] = rng.uniform(-0.15, 0.15, size=(n, 3, 15))
    scene = GaussianScene(
        positions=positions,
        log_scales=rng.uniform(np.log(0.1), np.log(0.45), size=(n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.uniform(-1.0, 1.5, size=n),
        sh_coeffs=sh,
        labels=rng.integers(0, 2, size=n).astype(np.uint8),
        background_color=rng.uniform(0, 1, size=3),
    )
    scene.rotations /= np.linalg.norm(scene.rotations, axis=-1, keepdims=True)
    return scene


def oracle_render(scene, camera, settings=None):
    """Per-pixel, per-particle reference compositing. Independent loop
    structure; shares only the documented render semantics."""
    st = settings or RasterSettings()
    proj = project_scene(scene, camera, st)
    H, W = camera.height, camera.width
    bg = scene.background_color
    rgb = np.tile(bg, (H, W, 1))
    depth = np.zeros((H, W))
    alpha = np.zeros((H, W))
    semantic = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            px, py = j + 0.5, i + 0.5
            T = 1.0
            crgb = np.zeros(3)
            draw = 0.0
            A = 0.0
            sem = 0.0
            for k in range(len(proj.idx)):
                dx = px - proj.mean2d[k, 0]
                dy = py - proj.mean2d[k, 1]
                r = proj.radius[k]
                if abs(dx) <= r and abs(dy) <= r:
                    inv = proj.inv_cov2d[k]
                    power = -0.5 * (
                        dx * dx * inv[0, 0] + dy * dy * inv[1, 1] + 2 * dx * dy * inv[0, 1]
                    )
                    G = np.exp(power)
                else:
                    G = 0.0
                a = min(proj.sig_o[k] * G, ALPHA_CLAMP)
                w = a * T
                crgb = crgb + w * proj.colors[k]
                draw = draw + w * proj.depth[k]
                A = A + w
                sem = sem + w * proj.sem_value[k]
                T = T * (1.0 - a)
                if T < T_TERMINATE:
                    break
            rgb[i, j] = crgb + T * bg
            alpha[i, j] = A
            depth[i, j] = draw / A if A > DEPTH_ALPHA_MIN else 0.0
            semantic[i, j] = sem
    return RenderOutput(rgb, depth, alpha, semantic)


def scalar_loss_weights(rng, camera):
    """Fixed random upstream gradients packaged as a RenderOutput."""
    H, W = camera.height, camera.width
    return RenderOutput(
        rgb=rng.normal(size=(H, W, 3)),
        depth=rng.normal(size=(H, W)),
        alpha=rng.normal(size=(H, W)),
        semantic=rng.normal(size=(H, W)),
    )


def render_scalar_loss(scene, camera, weights, settings, render_fn):
    out = render_fn(scene, camera, settings)
    return (
        np.sum(out.rgb * weights.rgb)
        + np.sum(out.depth * weights.depth)
        + np.sum(out.alpha * weights.alpha)
        + np.sum(out.semantic * weights.semantic)
    )
