import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acrsc.numerics import (
    MetricsRecord,
    RngStream,
    batch_metrics,
    cg_least_squares,
    gaussian_noise,
    psnr,
    ssim,
)


class TestRng:
    def test_same_seed_same_draws(self):
        a, b = RngStream(123), RngStream(123)
        np.testing.assert_array_equal(a.normal((50,)), b.normal((50,)))
        np.testing.assert_array_equal(a.uniform((7,)), b.uniform((7,)))
        np.testing.assert_array_equal(a.permutation(20), b.permutation(20))

    def test_box_muller_pairing(self):
        # normals are built from consecutive uniform pairs of the same stream
        u = RngStream(5).uniform((4,))
        z = RngStream(5).normal((4,))
        r0 = math.sqrt(-2 * math.log1p(-u[0]))
        assert z[0] == pytest.approx(r0 * math.cos(2 * math.pi * u[1]), abs=1e-15)
        assert z[1] == pytest.approx(r0 * math.sin(2 * math.pi * u[1]), abs=1e-15)

    def test_spawn_independent_and_reproducible(self):
        s = RngStream(9)
        a, b = s.spawn(1), s.spawn(2)
        assert not np.array_equal(a.uniform((5,)), b.uniform((5,)))
        np.testing.assert_array_equal(RngStream(9).spawn(1).uniform((5,)), RngStream(9).spawn(1).uniform((5,)))

    def test_permutation_is_permutation(self):
        p = RngStream(3).permutation(100)
        assert sorted(p.tolist()) == list(range(100))

    def test_bad_seed(self):
        with pytest.raises(ValueError):
            RngStream(-1)


class TestGaussianNoise:
    def test_zero_sigma(self):
        np.testing.assert_array_equal(gaussian_noise((4, 5), 0.0, RngStream(1)), np.zeros((4, 5)))

    def test_deterministic(self):
        np.testing.assert_array_equal(
            gaussian_noise((3, 3), 0.2, RngStream(42)), gaussian_noise((3, 3), 0.2, RngStream(42))
        )

    def test_second_moment(self):
        # chi-square concentration: mean of 1e5 squared N(0, 0.04) draws has
        # relative std sqrt(2 / 1e5) = 0.45%; 5% is > 10 sigma.
        e = gaussian_noise(100000, 0.2, RngStream(0))
        assert abs(np.mean(e**2) - 0.04) < 0.05 * 0.04

    def test_variance_converges(self):
        errs = []
        for n in (1000, 10000, 100000):
            e = gaussian_noise(n, 1.0, RngStream(n))
            errs.append(abs(np.var(e) - 1.0))
            # five standard deviations of the sample variance
            assert errs[-1] < 5 * math.sqrt(2.0 / n)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            gaussian_noise(3, -0.1, RngStream(0))


def _dense_pair(M):
    return (lambda y: M.T @ y), (lambda x: M @ x)


class TestCgLeastSquares:
    def test_identity(self):
        g = RngStream(1).normal((6,))
        res = cg_least_squares(lambda y: y, lambda x: x, g)
        np.testing.assert_allclose(res.w, g, atol=1e-14)
        assert res.residual == pytest.approx(0.0, abs=1e-14)
        assert res.converged

    def test_scaled(self):
        g = RngStream(2).normal((6,))
        res = cg_least_squares(lambda y: 2 * y, lambda x: 2 * x, g)
        np.testing.assert_allclose(res.w, g / 2, atol=1e-14)

    def test_matches_svd_pinv(self):
        rng = RngStream(3)
        M = rng.normal((3, 5))
        g = rng.normal((5,))
        adj, fwd = _dense_pair(M)
        res = cg_least_squares(adj, fwd, g, tol=1e-14)
        oracle = np.linalg.pinv(M.T) @ g  # SVD-based
        np.testing.assert_allclose(res.w, oracle, atol=1e-8)
        assert res.residual == pytest.approx(np.linalg.norm(M.T @ oracle - g), abs=1e-8)

    def test_normal_residual_bound_many_operators(self):
        for seed in range(100):
            rng = RngStream(1000 + seed)
            m, n = 2 + seed % 5, 6 + seed % 4
            M = rng.normal((m, n))
            g = rng.normal((n,))
            adj, fwd = _dense_pair(M)
            tol = 1e-10
            res = cg_least_squares(adj, fwd, g, tol=tol, max_iter=200)
            assert res.converged
            rhs = M @ g
            assert np.linalg.norm(M @ (M.T @ res.w) - rhs) <= tol * np.linalg.norm(rhs) * (1 + 1e-6)

    def test_nonconvergence_flagged(self):
        rng = RngStream(4)
        M = rng.normal((20, 30)) @ np.diag(np.logspace(-6, 0, 30))
        g = rng.normal((30,))
        adj, fwd = _dense_pair(M)
        res = cg_least_squares(adj, fwd, g, tol=1e-15, max_iter=2)
        assert not res.converged
        assert np.all(np.isfinite(res.w))

    def test_inputs_untouched(self):
        g = RngStream(5).normal((4,))
        g0 = g.copy()
        cg_least_squares(lambda y: y, lambda x: x, g)
        np.testing.assert_array_equal(g, g0)


class TestPsnr:
    def test_identity_sentinel(self):
        x = RngStream(1).uniform((8, 8))
        assert psnr(x, x) == math.inf

    def test_uniform_offset(self):
        x = np.zeros((10, 10))
        assert psnr(x + 0.1, x, 1.0) == pytest.approx(20.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetric(self, seed):
        rng = RngStream(seed)
        a, b = rng.uniform((6, 6)), rng.uniform((6, 6))
        assert psnr(a, b) == psnr(b, a)


class TestSsim:
    def test_identity(self):
        x = RngStream(1).uniform((16, 16))
        assert ssim(x, x) == 1.0

    def test_constant_images(self):
        c1 = 1e-4
        expected = (2 * 0.08 + c1) / (0.04 + 0.16 + c1)
        assert ssim(np.full((12, 12), 0.2), np.full((12, 12), 0.4)) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.8001, abs=1e-4)

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 10)), np.zeros((10, 10)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((12, 12)), np.zeros((12, 13)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetric_and_bounded(self, seed):
        rng = RngStream(seed)
        a, b = rng.uniform((14, 14)), rng.uniform((14, 14))
        s = ssim(a, b)
        assert s == ssim(b, a)
        assert -1.0 <= s <= 1.0


class TestMetricsRecord:
    def test_mean_std_skip_infinite(self):
        rec = MetricsRecord(psnr_db=[10.0, math.inf, 20.0], ssim=[1.0, 0.5, 0.0])
        assert rec.psnr_mean == pytest.approx(15.0)
        assert rec.psnr_std == pytest.approx(5.0)
        assert rec.ssim_mean == pytest.approx(0.5)

    def test_batch(self):
        x = RngStream(2).uniform((3, 12, 12))
        rec = batch_metrics(x, x)
        assert rec.ssim == [1.0, 1.0, 1.0]
        assert all(p == math.inf for p in rec.psnr_db)
