"""Noise schedule, latent codec adjoints, distillation gradients, and the
multi-scale distillation objective."""

import numpy as np
import pytest

from refsplat.guidance import (
    Condition,
    DiracPrior,
    LinearCodec,
    MixturePrior,
    NoiseSchedule,
    SdsConfig,
    add_noise,
    analytic_denoiser,
    bilinear_resize,
    bilinear_resize_adjoint,
    cfg_combine,
    multiscale_sds,
    sample_sds_draws,
    sds_grad,
)
from refsplat.rasterizer import RasterSettings, render
from refsplat.scene import GaussianScene, InvalidInputError, Label, rgb_to_dc

from util import look_at_camera, random_scene


class TestSchedule:
    def test_variance_preserving(self):
        sched = NoiseSchedule()
        for t in np.linspace(0.02, 0.98, 25):
            assert abs(sched.alpha(t) ** 2 + sched.sigma(t) ** 2 - 1.0) < 1e-12
            assert abs(sched.weight(t) - sched.sigma(t) ** 2) < 1e-12

    def test_monotone_endpoints(self):
        sched = NoiseSchedule()
        ts = np.linspace(0.0, 1.0, 50)
        alphas = [sched.alpha(t) for t in ts]
        assert all(a >= b - 1e-12 for a, b in zip(alphas, alphas[1:]))
        assert abs(sched.alpha(0.0) - 1.0) < 1e-12
        assert abs(sched.alpha(1.0)) < 1e-12

    def test_sample_t_in_range(self):
        sched = NoiseSchedule()
        rng = np.random.default_rng(0)
        ts = [sched.sample_t(rng) for _ in range(200)]
        assert all(0.02 <= t <= 0.98 for t in ts)


class TestCodec:
    def test_encode_decode_identity_on_latents(self):
        rng = np.random.default_rng(1)
        codec = LinearCodec(k=4)
        z = rng.standard_normal((3, 8, 8))
        from refsplat.guidance import LatentImage

        z2 = codec.encode(codec.decode(LatentImage(z, codec.codec_id)))
        np.testing.assert_array_equal(z2.tensor, z)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(2)
        codec = LinearCodec(k=4)
        x = rng.standard_normal((16, 16, 3))
        y = rng.standard_normal((3, 4, 4))
        lhs = np.sum(codec.encode(x).tensor * y)
        rhs = np.sum(x * codec.encode_adjoint(y, (16, 16)))
        assert abs(lhs - rhs) < 1e-10

    def test_divisibility_error(self):
        with pytest.raises(InvalidInputError):
            LinearCodec(k=4).encode(np.zeros((10, 12, 3)))


class TestResize:
    def test_adjoint_identity(self):
        rng = np.random.default_rng(3)
        for in_hw, out_hw in [((17, 23), (8, 8)), ((8, 8), (20, 14)), ((9, 9), (9, 9))]:
            x = rng.standard_normal(in_hw + (3,))
            y = rng.standard_normal(out_hw + (3,))
            lhs = np.sum(bilinear_resize(x, out_hw) * y)
            rhs = np.sum(x * bilinear_resize_adjoint(y, in_hw))
            assert abs(lhs - rhs) < 1e-10

    def test_constant_preserved(self):
        x = np.full((12, 10, 3), 0.37)
        np.testing.assert_allclose(bilinear_resize(x, (5, 7)), 0.37, atol=1e-12)

    def test_identity_resize(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((6, 6, 3))
        np.testing.assert_allclose(bilinear_resize(x, (6, 6)), x, atol=1e-12)


class TestCoreAlgebra:
    def test_add_noise_value_and_validation(self):
        sched = NoiseSchedule()
        codec = LinearCodec(k=2)
        rng = np.random.default_rng(5)
        z = codec.encode(rng.uniform(size=(8, 8, 3)))
        eps = rng.standard_normal(z.tensor.shape)
        t = 0.3
        z_t = add_noise(sched, z, t, eps)
        np.testing.assert_allclose(
            z_t, np.cos(0.15 * np.pi) * z.tensor + np.sin(0.15 * np.pi) * eps, atol=1e-14
        )
        with pytest.raises(InvalidInputError):
            add_noise(sched, z, 0.001, eps)
        with pytest.raises(InvalidInputError):
            add_noise(sched, z, t, eps[:, :2])

    def test_cfg_identities(self):
        rng = np.random.default_rng(6)
        c = rng.standard_normal((3, 4, 4))
        u = rng.standard_normal((3, 4, 4))
        np.testing.assert_array_equal(cfg_combine(c, u, 0.0), c)
        a = 7.5
        np.testing.assert_allclose(cfg_combine(c, u, a), (1 + a) * c - a * u, atol=1e-12)
        np.testing.assert_array_equal(cfg_combine(c, c, 123.0), c)
        with pytest.raises(InvalidInputError):
            cfg_combine(c, u[:, :2], 1.0)

    def test_dirac_denoiser_recovers_noise(self):
        """With a point-mass prior, the optimal denoiser returns eps exactly
        when z_t was formed from the target."""
        sched = NoiseSchedule()
        rng = np.random.default_rng(7)
        z0 = rng.standard_normal((3, 4, 4))
        eps = rng.standard_normal((3, 4, 4))
        t = 0.44
        z_t = sched.alpha(t) * z0 + sched.sigma(t) * eps
        eps_hat = analytic_denoiser(sched, z_t, t, [z0])
        np.testing.assert_allclose(eps_hat, eps, atol=1e-10)

    def test_sds_grad_closed_form(self):
        """Dirac prior: gradient is w(t) alpha(t)^2 (z - z0) / sigma(t)."""
        sched = NoiseSchedule()
        codec = LinearCodec(k=2)
        rng = np.random.default_rng(8)
        target = rng.uniform(size=(8, 8, 3))
        prior = DiracPrior(codec, sched, lambda cond: target)
        img = rng.uniform(size=(8, 8, 3))
        z = codec.encode(img)
        z0 = codec.encode(target).tensor
        t = 0.6
        eps = rng.standard_normal(z.tensor.shape)
        g = sds_grad(prior, z, Condition(), t, eps)
        a, s = sched.alpha(t), sched.sigma(t)
        np.testing.assert_allclose(g, s * s * a * a * (z.tensor - z0) / s, atol=1e-10)
        # at the target the gradient vanishes for any noise draw
        g0 = sds_grad(prior, codec.encode(target), Condition(), t, eps)
        np.testing.assert_allclose(g0, 0.0, atol=1e-10)

    def test_mixture_denoiser_limits(self):
        sched = NoiseSchedule()
        codec = LinearCodec(k=2)
        rng = np.random.default_rng(9)
        imgs = [np.zeros((8, 8, 3)), np.ones((8, 8, 3))]
        prior = MixturePrior(codec, sched, imgs)
        t = 0.5
        a, s = sched.alpha(t), sched.sigma(t)
        # z_t exactly at the first target's mean: posterior collapses there
        z_t = a * codec.encode(imgs[0]).tensor
        eps_hat = prior.denoise(z_t, t, Condition())
        np.testing.assert_allclose(eps_hat, (z_t - a * 0.0) / s, atol=1e-6)
        # equidistant point: posterior mean is the average of the targets
        mid = a * 0.5 * np.ones((3, 4, 4))
        eps_mid = prior.denoise(mid, t, Condition())
        np.testing.assert_allclose(eps_mid, (mid - a * 0.5) / s, atol=1e-10)


def _flat_scene(color, half_extent=2.0):
    """One huge splat covering the whole view with a flat DC color."""
    sh = np.zeros((1, 3, 16))
    sh[0, :, 0] = rgb_to_dc(np.asarray(color, dtype=float))
    return GaussianScene(
        positions=np.zeros((1, 3)),
        log_scales=np.full((1, 3), np.log(half_extent)),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        opacity_logits=np.array([8.0]),
        sh_coeffs=sh,
        labels=np.array([int(Label.MASKED)], dtype=np.uint8),
        background_color=np.zeros(3),
    )


class TestMultiscaleSds:
    def _setup(self, mask_kind="full"):
        cam = look_at_camera([0, 0, -4], [0, 0, 0], width=32, height=32)
        codec = LinearCodec(k=4)
        sched = NoiseSchedule()
        target = np.full((16, 16, 3), 0.75)
        prior = DiracPrior(codec, sched, lambda cond: target)
        cfg = SdsConfig(native_resolution=16, n_local_patches=2)
        scene = random_scene(np.random.default_rng(10), n=6, cam=cam)
        if mask_kind == "full":
            mask = np.ones((32, 32), dtype=np.uint8)
        elif mask_kind == "empty":
            mask = np.zeros((32, 32), dtype=np.uint8)
        else:
            mask = np.zeros((32, 32), dtype=np.uint8)
            mask[8:24, 8:24] = 1
        return scene, cam, mask, prior, cfg

    def test_unmasked_grads_exactly_zero(self):
        scene, cam, mask, prior, cfg = self._setup("box")
        grads, diag = multiscale_sds(
            scene, cam, mask, prior, cfg, rng=np.random.default_rng(0)
        )
        unmasked = scene.labels != Label.MASKED
        assert unmasked.any() and (~unmasked).any()
        for arr in grads.fields().values():
            assert np.all(arr[unmasked] == 0.0)
        masked_total = sum(
            np.abs(arr[~unmasked]).sum() for arr in grads.fields().values()
        )
        assert masked_total > 0

    def test_empty_mask_skips_local(self):
        scene, cam, mask, prior, cfg = self._setup("empty")
        _, diag = multiscale_sds(scene, cam, mask, prior, cfg, rng=np.random.default_rng(0))
        assert diag["local_skipped"]

    def test_branch_additivity(self):
        """Global-only plus local-only gradients equal the combined run when
        the random draws are shared."""
        scene, cam, mask, prior, cfg = self._setup("box")
        plan = sample_sds_draws(np.random.default_rng(3), prior, cfg)
        import dataclasses

        g_both, _ = multiscale_sds(scene, cam, mask, prior, cfg, plan=plan)
        g_g, _ = multiscale_sds(
            scene, cam, mask, prior, dataclasses.replace(cfg, include_local=False), plan=plan
        )
        g_l, _ = multiscale_sds(
            scene, cam, mask, prior, dataclasses.replace(cfg, include_global=False), plan=plan
        )
        for k, v in g_both.fields().items():
            np.testing.assert_allclose(
                v, g_g.fields()[k] + g_l.fields()[k], rtol=1e-9, atol=1e-12
            )

    def test_native_resolution_validation(self):
        scene, cam, mask, prior, cfg = self._setup()
        cfg.native_resolution = 64
        with pytest.raises(InvalidInputError):
            multiscale_sds(scene, cam, mask, prior, cfg, rng=np.random.default_rng(0))

    def test_descends_toward_target(self):
        """Gradient descent with a flat-color Dirac prior drives the rendered
        color toward the target."""
        cam = look_at_camera([0, 0, -4], [0, 0, 0], width=32, height=32)
        codec = LinearCodec(k=4)
        sched = NoiseSchedule()
        target_color = np.array([0.8, 0.2, 0.6])
        target = np.tile(target_color, (16, 16, 1))
        prior = DiracPrior(codec, sched, lambda cond: target)
        cfg = SdsConfig(native_resolution=16, n_local_patches=2)
        scene = _flat_scene([0.2, 0.7, 0.3], half_extent=6.0)
        scene.opacity_logits[:] = 12.0  # fully opaque over the whole view
        mask = np.ones((32, 32), dtype=np.uint8)
        rng = np.random.default_rng(11)

        def mse():
            out = render(scene, cam)
            return float(np.mean((out.rgb - target_color) ** 2))

        start = mse()
        for _ in range(300):
            grads, _ = multiscale_sds(scene, cam, mask, prior, cfg, rng=rng)
            scene.sh_coeffs -= 0.05 * grads.sh_coeffs
        end = mse()
        assert end < 1e-2
        assert end < 0.05 * start
