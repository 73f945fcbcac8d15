"""Autodiff tape (including gradient-of-gradient), discriminator math, patch
sampling, and the adversarial step."""

import numpy as np
import pytest

import refsplat.autodiff as ad
from refsplat.adversarial import (
    AdamState,
    AdvStepResult,
    Discriminator,
    adam_update,
    adv_step,
    sample_patches,
    scatter_patch_grads,
)
from refsplat.scene import InvalidInputError


def _fd(f, x, h=1e-5):
    """Central finite differences of scalar f over array x."""
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        x[idx] += h
        fp = f()
        x[idx] -= 2 * h
        fm = f()
        x[idx] += h
        g[idx] = (fp - fm) / (2 * h)
    return g


class TestTapeFirstOrder:
    def test_mlp_gradient_matches_fd(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 5))
        w1, b1 = rng.standard_normal((5, 4)), rng.standard_normal(4)
        w2, b2 = rng.standard_normal((4, 1)), rng.standard_normal(1)

        def loss_np():
            h = np.maximum(x @ w1 + b1, 0.2 * (x @ w1 + b1))
            return float(np.mean(h @ w2 + b2))

        vx, vw1, vb1, vw2, vb2 = map(ad.Var, (x, w1, b1, w2, b2))
        h = ad.leaky_relu(ad.add_bias(ad.matmul(vx, vw1), vb1), 0.2)
        out = ad.mean(ad.add_bias(ad.matmul(h, vw2), vb2))
        assert abs(out.value - loss_np()) < 1e-12
        grads = ad.grad(out, [vx, vw1, vb1, vw2, vb2])
        for var, arr in zip(grads, (x, w1, b1, w2, b2)):
            np.testing.assert_allclose(var.value, _fd(loss_np, arr), rtol=1e-5, atol=1e-8)

    def test_sigmoid_softplus_grads(self):
        x = np.array([-2.0, -0.3, 0.0, 0.7, 3.0])
        vx = ad.Var(x)
        out = ad.total(ad.add(ad.sigmoid(vx), ad.softplus(vx)))
        (g,) = ad.grad(out, [vx])
        s = 1 / (1 + np.exp(-x))
        np.testing.assert_allclose(g.value, s * (1 - s) + s, atol=1e-12)

    def test_unused_variable_zero_grad(self):
        a, b = ad.Var(2.0), ad.Var(np.ones(3))
        (g,) = ad.grad(ad.mul(a, a), [b])
        np.testing.assert_array_equal(g.value, np.zeros(3))

    def test_grad_requires_scalar(self):
        v = ad.Var(np.ones(2))
        with pytest.raises(ValueError):
            ad.grad(v, [v])


class TestTapeSecondOrder:
    def test_quadratic_hessian(self):
        """d/dx of d/dx (x^T A x) = (A + A^T) x, checked exactly."""
        rng = np.random.default_rng(1)
        A = rng.standard_normal((4, 4))
        x0 = rng.standard_normal(4)
        vx = ad.Var(x0.reshape(1, 4))
        q = ad.total(ad.mul(vx, ad.matmul(vx, ad.const(A.T))))  # x A x^T
        (g,) = ad.grad(q, [vx])
        np.testing.assert_allclose(g.value.ravel(), (A + A.T) @ x0, atol=1e-12)
        # second round: grad of |g|^2 is 2 (A + A^T)^T g
        sq = ad.total(ad.square(g))
        (gg,) = ad.grad(sq, [vx])
        expect = 2.0 * (A + A.T).T @ ((A + A.T) @ x0)
        np.testing.assert_allclose(gg.value.ravel(), expect, atol=1e-10)

    def test_mlp_penalty_double_backprop_fd(self):
        """Gradient w.r.t. parameters of |grad_x D(x)|^2 matches finite
        differences for random small MLPs, away from activation kinks."""
        n_pass = 0
        seed = 0
        while n_pass < 20:
            seed += 1
            rng = np.random.default_rng(seed)
            disc = Discriminator(patch_size=2, rng=rng, hidden=(6, 5))
            x = rng.standard_normal((3, 12))
            # reject draws near a leaky-ReLU kink so FD stays on one branch
            pre1 = x @ disc.weights[0] + disc.biases[0]
            h1 = np.where(pre1 > 0, pre1, 0.2 * pre1)
            pre2 = h1 @ disc.weights[1] + disc.biases[1]
            if min(np.abs(pre1).min(), np.abs(pre2).min()) < 1e-3:
                continue
            n_pass += 1

            def penalty_np():
                params = [ad.const(p) for p in disc.params()]
                vx = ad.Var(x)
                (g,) = ad.grad(ad.total(disc.forward(vx, params)), [vx])
                return float(np.sum(g.value**2))

            params = [ad.Var(p) for p in disc.params()]
            vx = ad.Var(x)
            (g,) = ad.grad(ad.total(disc.forward(vx, params)), [vx])
            pen = ad.total(ad.square(g))
            grads = ad.grad(pen, params)
            for var, arr in zip(grads, disc.params()):
                fd = _fd(penalty_np, arr, h=1e-5)
                np.testing.assert_allclose(
                    var.value, fd, rtol=2e-3, atol=1e-6,
                    err_msg=f"seed {seed}",
                )


class TestGanF:
    def test_monotone_and_bounded(self):
        xs = np.linspace(-20, 20, 1000)
        f = ad.gan_f(ad.const(xs)).value
        assert np.all(np.diff(f) > 0)
        assert np.all(f < 0)
        assert abs(ad.gan_f(ad.const(0.0)).value - (-np.log(2))) < 1e-12


class TestSamplePatches:
    def _images(self, H=40, W=40):
        rng = np.random.default_rng(2)
        ref = rng.uniform(size=(H, W, 3))
        ren = rng.uniform(size=(H, W, 3))
        mask = np.zeros((H, W), dtype=np.uint8)
        mask[10:20, 15:30] = 1
        return ref, ren, mask

    def test_counts_shapes_and_content(self):
        ref, ren, mask = self._images()
        real, fake, coords = sample_patches(ref, ren, mask, 5, 16, np.random.default_rng(3))
        assert real.shape == fake.shape == (5, 16, 16, 3)
        for r, f2, (ty, tx) in zip(real, fake, coords):
            np.testing.assert_array_equal(r, ref[ty : ty + 16, tx : tx + 16])
            np.testing.assert_array_equal(f2, ren[ty : ty + 16, tx : tx + 16])

    def test_zero_count(self):
        ref, ren, mask = self._images()
        real, fake, coords = sample_patches(ref, ren, mask, 0, 16, np.random.default_rng(3))
        assert real.shape == (0, 16, 16, 3) and len(coords) == 0

    def test_deterministic_under_seed(self):
        ref, ren, mask = self._images()
        _, _, c1 = sample_patches(ref, ren, mask, 8, 16, np.random.default_rng(42))
        _, _, c2 = sample_patches(ref, ren, mask, 8, 16, np.random.default_rng(42))
        np.testing.assert_array_equal(c1, c2)

    def test_small_box_patches_contain_it(self):
        ref, ren, mask = self._images()
        mask[:] = 0
        mask[20:23, 20:23] = 1
        _, _, coords = sample_patches(ref, ren, mask, 10, 32, np.random.default_rng(4))
        for ty, tx in coords:
            assert ty <= 20 and ty + 32 >= 23
            assert tx <= 20 and tx + 32 >= 23

    def test_errors(self):
        ref, ren, mask = self._images()
        with pytest.raises(InvalidInputError):
            sample_patches(ref, ren, mask, 4, 64, np.random.default_rng(0))
        with pytest.raises(InvalidInputError):
            sample_patches(ref, ren, np.zeros_like(mask), 4, 16, np.random.default_rng(0))


class TestAdvStep:
    def _batches(self, n=4, size=4, seed=5):
        rng = np.random.default_rng(seed)
        return rng.uniform(size=(n, size, size, 3)), rng.uniform(size=(n, size, size, 3))

    def test_zero_discriminator_baseline(self):
        """All-zero weights: D == 0, both f-terms are -log 2, penalty 0."""
        disc = Discriminator(patch_size=4, hidden=(8, 8))
        disc.set_params([np.zeros_like(p) for p in disc.params()])
        real, fake = self._batches()
        res = adv_step(disc, real, fake, lambda_gp=1.0)
        assert abs(res.disc_loss - (-2 * np.log(2))) < 1e-12
        assert abs(res.gen_loss - (-np.log(2))) < 1e-12

    def test_linear_discriminator_closed_form(self):
        """Single linear layer, no penalty: gradients match hand algebra."""
        disc = Discriminator(patch_size=2, hidden=())
        rng = np.random.default_rng(6)
        w = rng.standard_normal((12, 1))
        b = rng.standard_normal(1)
        disc.set_params([w, b])
        real, fake = self._batches(n=3, size=2)
        res = adv_step(disc, real, fake, lambda_gp=0.0)
        xf = fake.reshape(3, -1)
        xr = real.reshape(3, -1)
        sf = 1 / (1 + np.exp(-(xf @ w + b)))  # f'(x) = sigmoid(-x) -> chain
        sr = 1 / (1 + np.exp(-(xr @ w + b)))
        # d/dw mean f(xw+b) = mean (1-sigmoid(xw+b)) x ; d/dw mean f(-(xw+b)) = -mean sigmoid(xw+b) x
        gw = (xf * (1 - sf)).mean(axis=0) - (xr * sr).mean(axis=0)
        gb = np.mean(1 - sf) - np.mean(sr)
        np.testing.assert_allclose(res.param_grads[0].ravel(), gw, atol=1e-10)
        np.testing.assert_allclose(res.param_grads[1], gb, atol=1e-10)
        # generator pixel gradients: d mean f(D(fake)) / d fake = (1-sf) w / n
        expect = ((1 - sf) @ w.T / 3).reshape(fake.shape)
        np.testing.assert_allclose(res.fake_pixel_grads, expect, atol=1e-10)

    def test_penalty_gradient_matches_fd(self):
        rng = np.random.default_rng(7)
        disc = Discriminator(patch_size=2, rng=rng, hidden=(6,))
        real, fake = self._batches(n=3, size=2, seed=8)

        def obj():
            r = adv_step(disc, real, fake, lambda_gp=0.7)
            return r.disc_loss

        res = adv_step(disc, real, fake, lambda_gp=0.7)
        for g, p in zip(res.param_grads, disc.params()):
            np.testing.assert_allclose(g, _fd(obj, p, h=1e-5), rtol=2e-3, atol=1e-7)

    def test_penalty_on_real_switch(self):
        rng = np.random.default_rng(9)
        disc = Discriminator(patch_size=2, rng=rng, hidden=(6,))
        real, fake = self._batches(n=3, size=2, seed=10)
        a = adv_step(disc, real, fake, lambda_gp=0.5, penalty_on="fake")
        b = adv_step(disc, real, fake, lambda_gp=0.5, penalty_on="real")
        assert a.disc_loss != b.disc_loss
        with pytest.raises(InvalidInputError):
            adv_step(disc, real, fake, penalty_on="both")

    def test_nonfinite_skip(self):
        disc = Discriminator(patch_size=2, hidden=(4,))
        bad = disc.params()
        bad[0] = bad[0] * np.inf
        disc.set_params(bad)
        real, fake = self._batches(n=2, size=2)
        res = adv_step(disc, real, fake)
        assert res.skipped
        assert all(np.all(g == 0) for g in res.param_grads)

    def test_scatter_outside_patches_zero(self):
        g = np.ones((2, 4, 4, 3))
        coords = np.array([[0, 0], [0, 0]])
        full = scatter_patch_grads(g, coords, (10, 10))
        assert np.all(full[:4, :4] == 2.0)
        assert np.all(full[4:] == 0.0) and np.all(full[:, 4:] == 0.0)


class TestAdam:
    def test_training_separates_real_from_fake(self):
        """A few ascent steps separate the two patch distributions. Under the
        implemented objective the discriminator drives f(D(fake)) up and
        f(-D(real)) up, so fake logits rise and real logits fall."""
        rng = np.random.default_rng(11)
        disc = Discriminator(patch_size=4, rng=rng, hidden=(32,))
        real = np.clip(rng.normal(0.8, 0.05, size=(16, 4, 4, 3)), 0, 1)
        fake = np.clip(rng.normal(0.2, 0.05, size=(16, 4, 4, 3)), 0, 1)
        state = AdamState()
        losses = []
        for _ in range(100):
            res = adv_step(disc, real, fake, lambda_gp=0.1)
            disc.set_params(adam_update(disc.params(), res.param_grads, state))
            losses.append(res.disc_loss)
        assert losses[-1] > losses[0]  # objective is being maximized
        assert disc.logits(fake).mean() > disc.logits(real).mean() + 1.0
