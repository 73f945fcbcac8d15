"""Depth regularization: deterministic denoising, the ground-truth depth
oracle, loss values, gradient routing, and a finite-difference check on a
particle's position."""

import numpy as np
import pytest

from refsplat.depth_reg import (
    DepthConfig,
    DepthOracle,
    GroundTruthDepthOracle,
    ddim_denoise,
    depth_loss,
)
from refsplat.guidance import Condition, DiracPrior, LinearCodec, NoiseSchedule
from refsplat.rasterizer import RasterSettings, render
from refsplat.scene import GaussianScene, InvalidInputError, Label, rgb_to_dc

from util import look_at_camera, random_scene

EXACT_SETTINGS = RasterSettings(cull_sigma=None)


def _make_prior(target_image):
    codec = LinearCodec(k=4)
    return DiracPrior(codec, NoiseSchedule(), lambda cond: target_image)


class TestDdim:
    def test_converges_to_dirac_target(self):
        """With a point-mass prior the deterministic trajectory lands on the
        target latent from any start."""
        rng = np.random.default_rng(0)
        target = rng.uniform(size=(16, 16, 3))
        prior = _make_prior(target)
        z0 = prior.encode(target).tensor
        z_start = rng.standard_normal(z0.shape)
        out = ddim_denoise(prior, z_start, 0.9, Condition(), steps=10)
        np.testing.assert_allclose(out, z0, atol=1e-8)

    def test_step_validation(self):
        prior = _make_prior(np.zeros((16, 16, 3)))
        with pytest.raises(InvalidInputError):
            ddim_denoise(prior, np.zeros((3, 4, 4)), 0.5, Condition(), steps=0)


class TestOracle:
    def test_affine_perturbation_of_true_depth(self):
        rng = np.random.default_rng(1)
        scene = random_scene(rng, n=5)
        cam = look_at_camera([0, 0, -4], [0, 0, 0])
        oracle = GroundTruthDepthOracle(scene, scale=0.5, offset=0.25)
        d = oracle(np.zeros((32, 32, 3)), cam)
        true = render(scene, cam).depth
        np.testing.assert_allclose(d, 0.5 * true + 0.25, atol=1e-12)


def _sheet_scene(z, color, n_side=12, extent=1.6, label=Label.MASKED, opacity=6.0):
    """A flat sheet of overlapping particles at world depth-plane z."""
    xs = np.linspace(-extent, extent, n_side)
    gx, gy = np.meshgrid(xs, xs)
    n = n_side * n_side
    positions = np.stack([gx.ravel(), gy.ravel(), np.full(n, z)], axis=-1)
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = rgb_to_dc(np.asarray(color, dtype=float))
    return GaussianScene(
        positions=positions,
        log_scales=np.full((n, 3), np.log(2 * extent / n_side)),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, opacity),
        sh_coeffs=sh,
        labels=np.full(n, int(label), dtype=np.uint8),
        background_color=np.zeros(3),
    )


class TestDepthLoss:
    def _setup(self):
        cam = look_at_camera([0, 0, -4], [0, 0, 0], width=32, height=32)
        scene = _sheet_scene(0.0, [0.6, 0.4, 0.3])
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[10:22, 10:22] = 1
        target_img = np.full((32, 32, 3), 0.5)
        prior = _make_prior(target_img)
        cfg = DepthConfig(native_resolution=32)
        return scene, cam, mask, prior, cfg

    def test_zero_when_target_matches(self):
        """An oracle returning exactly the rendered depth (and alignment being
        identity) yields zero loss and zero gradients."""
        scene, cam, mask, prior, cfg = self._setup()
        rendered_depth = render(scene, cam).depth

        class Echo(DepthOracle):
            def __call__(self, image, camera):
                return rendered_depth

        res = depth_loss(scene, cam, mask, prior, Echo(), t_depth=0.5,
                         config=cfg, rng=np.random.default_rng(0))
        assert not res.skipped
        assert res.loss < 1e-18
        for arr in res.grads.fields().values():
            np.testing.assert_allclose(arr, 0.0, atol=1e-15)

    def test_single_pixel_difference_value(self):
        """One masked pixel with depth error 2 gives loss 4."""
        scene, cam, mask, prior, cfg = self._setup()
        mask1 = np.zeros_like(mask)
        mask1[16, 16] = 1
        rendered_depth = render(scene, cam).depth

        class OffByTwo(DepthOracle):
            def __call__(self, image, camera):
                d = rendered_depth.copy()
                d[16, 16] -= 2.0
                return d

        res = depth_loss(scene, cam, mask1, prior, OffByTwo(), t_depth=0.5,
                         config=DepthConfig(native_resolution=32, bilateral_iterations=0),
                         rng=np.random.default_rng(0))
        assert abs(res.loss - 4.0) < 1e-8

    def test_unmasked_grads_zero(self):
        _, cam, mask, prior, cfg = self._setup()
        scene = random_scene(np.random.default_rng(12), n=8, cam=cam)
        scene.labels[::2] = Label.UNMASKED
        scene.labels[1::2] = Label.MASKED
        oracle = GroundTruthDepthOracle(random_scene(np.random.default_rng(2), n=5, cam=cam))
        res = depth_loss(scene, cam, mask, prior, oracle, t_depth=0.5,
                         config=cfg, rng=np.random.default_rng(1))
        assert res.loss > 0
        unmasked = scene.labels != Label.MASKED
        for arr in res.grads.fields().values():
            assert np.all(arr[unmasked] == 0.0)

    def test_oracle_failure_skips(self):
        scene, cam, mask, prior, cfg = self._setup()

        class Broken(DepthOracle):
            def __call__(self, image, camera):
                raise RuntimeError("no depth today")

        res = depth_loss(scene, cam, mask, prior, Broken(), t_depth=0.5,
                         config=cfg, rng=np.random.default_rng(0))
        assert res.skipped and res.loss == 0.0

        class NonFinite(DepthOracle):
            def __call__(self, image, camera):
                return np.full((32, 32), np.nan)

        res = depth_loss(scene, cam, mask, prior, NonFinite(), t_depth=0.5,
                         config=cfg, rng=np.random.default_rng(0))
        assert res.skipped

    def test_position_gradient_matches_fd(self):
        """Gradient w.r.t. a masked particle's position matches central
        finite differences (the target depth held fixed)."""
        rng = np.random.default_rng(3)
        cam = look_at_camera([0, 0, -4], [0, 0, 0])
        scene = random_scene(rng, n=6, cam=cam)
        scene.labels[:] = Label.MASKED
        mask = np.ones((32, 32), dtype=np.uint8)
        mask[:8] = 0  # keep some unmasked pixels for alignment
        prior = _make_prior(np.full((32, 32, 3), 0.5))
        cfg = DepthConfig(native_resolution=32, bilateral_iterations=0)
        oracle = GroundTruthDepthOracle(
            random_scene(np.random.default_rng(4), n=5, cam=cam),
            settings=EXACT_SETTINGS,
        )
        res = depth_loss(scene, cam, mask, prior, oracle, t_depth=0.5,
                         eps=np.zeros((3, 8, 8)), config=cfg, settings=EXACT_SETTINGS)
        target = res.aligned_target

        def loss_at(scene_mod):
            out = render(scene_mod, cam, EXACT_SETTINGS)
            diff = np.where(mask.astype(bool), out.depth - target, 0.0)
            return float(np.sum(diff**2) / mask.sum())

        h = 1e-4
        checked = 0
        for i in range(len(scene)):
            for ax in range(3):
                sp = scene.copy()
                sp.positions[i, ax] += h
                sm = scene.copy()
                sm.positions[i, ax] -= h
                fd = (loss_at(sp) - loss_at(sm)) / (2 * h)
                got = res.grads.positions[i, ax]
                if abs(fd) > 1e-6 or abs(got) > 1e-6:
                    assert abs(got - fd) <= 1e-3 * max(abs(fd), abs(got)) + 1e-6
                    checked += 1
        assert checked > 5
