"""Procedural desk-scale test scenes.

Builds a textured "room" of roughly 500 Gaussians plus a dense floating
"object" cluster, with an inward-facing camera arc. The object cluster is
deliberately dense (~two dozen heavily overlapping particles) so that each
particle's contribution footprint is mostly covered by the cluster's
thresholded semantic region — that is what makes label consolidation a
fixed point on these scenes. Per-view masks are exactly the thresholded
semantic render of the object particles, and ground-truth images are
renders of the object-free scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import CameraView, GaussianScene, Label, concat_scenes, rgb_to_dc
from .rasterizer import RasterSettings, render
from .guidance import DiracPrior, LinearCodec, NoiseSchedule, bilinear_resize


def look_at_camera(eye, target, width=64, height=64, fov_deg=60.0, view_id=0) -> CameraView:
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
    R = np.stack([right, down, fwd])
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


@dataclass
class ToyConfig:
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0
    n_views: int = 20
    camera_radius: float = 4.0
    arc_degrees: float = 70.0
    object_particles: int = 24
    object_center: tuple = (0.0, 0.0, 0.2)
    object_radius: float = 0.18
    tau_prime: float = 0.3
    room_density: float = 1.0  # scales the room's grid resolution


@dataclass
class ToySceneBundle:
    complete: GaussianScene       # room only, all Unmasked
    augmented: GaussianScene      # room + object, object labeled Masked
    cameras: list                 # CameraView with image (augmented) + mask
    gt_images: list               # object-free renders, one per camera
    object_index: np.ndarray      # indices of object particles in `augmented`


def _plane(rng, origin, u_axis, v_axis, nu, nv, base_color, freq):
    """Grid of splats on a plane patch with a smooth sinusoidal texture."""
    u = np.linspace(-1.0, 1.0, nu)
    v = np.linspace(-1.0, 1.0, nv)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    uu = uu.reshape(-1)
    vv = vv.reshape(-1)
    n = uu.size
    origin = np.asarray(origin, dtype=float)
    u_axis = np.asarray(u_axis, dtype=float)
    v_axis = np.asarray(v_axis, dtype=float)
    positions = (
        origin
        + uu[:, None] * u_axis
        + vv[:, None] * v_axis
        + rng.normal(scale=0.02, size=(n, 3))
    )
    spacing = max(
        np.linalg.norm(u_axis) * 2 / max(nu - 1, 1),
        np.linalg.norm(v_axis) * 2 / max(nv - 1, 1),
    )
    phase = rng.uniform(0, 2 * np.pi, size=3)
    wobble = np.stack(
        [0.25 * np.sin(freq * np.pi * uu + phase[c]) * np.cos(freq * np.pi * vv + phase[2 - c])
         for c in range(3)],
        axis=-1,
    )
    colors = np.clip(np.asarray(base_color) + wobble + rng.normal(scale=0.03, size=(n, 3)), 0.05, 0.95)
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = rgb_to_dc(colors)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianScene(
        positions=positions,
        log_scales=np.full((n, 3), np.log(0.55 * spacing)),
        rotations=rotations,
        opacity_logits=np.full(n, 2.5),
        sh_coeffs=sh,
        labels=np.full(n, int(Label.UNMASKED), dtype=np.uint8),
    )


def _room(rng, density: float = 1.0) -> GaussianScene:
    def n(base):
        return max(3, int(round(base * density)))

    parts = [
        # back wall
        _plane(rng, [0, 0, 2.4], [3.0, 0, 0], [0, 1.7, 0], n(16), n(10), [0.55, 0.45, 0.35], 2.0),
        # floor
        _plane(rng, [0, 1.7, 0.8], [3.0, 0, 0], [0, 0, 1.6], n(16), n(10), [0.35, 0.45, 0.55], 3.0),
        # ceiling
        _plane(rng, [0, -1.7, 0.8], [3.0, 0, 0], [0, 0, 1.6], n(12), n(8), [0.5, 0.5, 0.5], 1.5),
        # side walls
        _plane(rng, [-3.0, 0, 0.8], [0, 0, 1.6], [0, 1.7, 0], n(10), n(8), [0.45, 0.55, 0.4], 2.5),
        _plane(rng, [3.0, 0, 0.8], [0, 0, 1.6], [0, 1.7, 0], n(10), n(8), [0.55, 0.4, 0.5], 2.5),
    ]
    scene = parts[0]
    for part in parts[1:]:
        scene = concat_scenes(scene, part)
    return scene


def _object(rng, cfg: ToyConfig) -> GaussianScene:
    n = cfg.object_particles
    center = np.asarray(cfg.object_center, dtype=float)
    positions = center + rng.uniform(-cfg.object_radius, cfg.object_radius, size=(n, 3))
    colors = np.clip(
        np.array([0.85, 0.2, 0.15]) + rng.normal(scale=0.05, size=(n, 3)), 0.05, 0.95
    )
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = rgb_to_dc(colors)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianScene(
        positions=positions,
        log_scales=np.full((n, 3), np.log(0.15)),
        rotations=rotations,
        opacity_logits=np.full(n, 3.0),
        sh_coeffs=sh,
        labels=np.full(n, int(Label.MASKED), dtype=np.uint8),
    )


def toy_cameras(cfg: ToyConfig) -> list:
    """Inward-facing arc of cameras in front of the room."""
    cams = []
    half = np.radians(cfg.arc_degrees) / 2.0
    angles = np.linspace(-half, half, cfg.n_views)
    for i, ang in enumerate(angles):
        eye = np.array(
            [
                cfg.camera_radius * np.sin(ang),
                0.5 * np.sin(3.1 * ang),
                -cfg.camera_radius * np.cos(ang) + 0.2,
            ]
        )
        cams.append(
            look_at_camera(
                eye, [0.0, 0.0, 0.2],
                width=cfg.width, height=cfg.height, fov_deg=cfg.fov_deg, view_id=i,
            )
        )
    return cams


def make_toy_scene(seed: int, config: ToyConfig | None = None,
                   settings: RasterSettings | None = None) -> ToySceneBundle:
    cfg = config or ToyConfig()
    settings = settings or RasterSettings()
    rng = np.random.default_rng(seed)
    room = _room(rng, cfg.room_density)
    obj = _object(rng, cfg)
    augmented = concat_scenes(room, obj)
    object_index = np.arange(len(room), len(augmented))
    cameras = toy_cameras(cfg)
    gt_images = []
    for cam in cameras:
        out = render(augmented, cam, settings)
        cam.image = out.rgb
        cam.mask = (out.semantic >= cfg.tau_prime).astype(np.float64)
        gt_images.append(render(room, cam, settings).rgb)
    return ToySceneBundle(
        complete=room,
        augmented=augmented,
        cameras=cameras,
        gt_images=gt_images,
        object_index=object_index,
    )


def gt_dirac_prior(gt_images, native_resolution: int, k: int = 4,
                   schedule: NoiseSchedule | None = None) -> DiracPrior:
    """Analytic point-mass prior whose target is the ground-truth render of
    the conditioned view: the full image resized to native resolution for
    global conditions, or the raw crop at the condition's patch box for
    local conditions."""
    nat = native_resolution

    def target_fn(condition):
        idx = condition.view_id if 0 <= condition.view_id < len(gt_images) else 0
        gt = gt_images[idx]
        if condition.patch_box is None:
            return bilinear_resize(gt, (nat, nat))
        y0, x0, h, w = condition.patch_box
        return gt[y0 : y0 + h, x0 : x0 + w]

    return DiracPrior(LinearCodec(k=k), schedule or NoiseSchedule(), target_fn)
