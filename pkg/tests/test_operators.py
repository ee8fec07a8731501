import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acrsc import kernels
from acrsc.data import ellipse_phantoms
from acrsc.numerics import RngStream, psnr
from acrsc.operators import (
    BlurOp,
    DenseOp,
    IdentityOp,
    RadonGeometry,
    RadonOp,
    ScaledIdentityOp,
    dot_test,
    fbp,
    make_operator,
    pinv_adjoint_apply,
    pinv_apply,
    pinv_factors,
)


def _all_ops():
    rng = RngStream(100)
    return [
        IdentityOp((6, 5)),
        ScaledIdentityOp((6, 5), 0.5),
        BlurOp((12, 10), 1.0, 5),
        DenseOp(rng.normal((4, 6))),
        RadonOp(RadonGeometry(16, 9, 32)),
        RadonOp(RadonGeometry(32, 45, 64)),
    ]


def _disk(n, radius, supersample=8):
    t = (np.arange(n * supersample) + 0.5) / supersample - n / 2
    X, Y = np.meshgrid(t, t)
    hi = (X**2 + Y**2 <= radius**2).astype(float)
    return hi.reshape(n, supersample, n, supersample).mean(axis=(1, 3))


class TestDotTests:
    @pytest.mark.parametrize("op", _all_ops(), ids=lambda o: o.kind)
    def test_adjoint_consistency(self, op):
        assert dot_test(op, RngStream(1), trials=5) <= 1e-10

    def test_blur_hundred_trials(self):
        assert dot_test(BlurOp((16, 16), 1.3, 7), RngStream(2), trials=100) <= 1e-10

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_linearity(self, seed):
        rng = RngStream(seed)
        for op in _all_ops():
            x, z = rng.normal(op.domain_shape), rng.normal(op.domain_shape)
            a, b = rng.normal(), rng.normal()
            lhs = op.apply(a * x + b * z)
            rhs = a * op.apply(x) + b * op.apply(z)
            assert np.linalg.norm(lhs - rhs) <= 1e-12 * max(np.linalg.norm(rhs), 1.0)


class TestSimpleOperators:
    def test_identity(self):
        x = RngStream(3).normal((4, 4))
        op = IdentityOp((4, 4))
        np.testing.assert_array_equal(op.apply(x), x)
        np.testing.assert_array_equal(op.adjoint(x), x)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            IdentityOp((4, 4)).apply(np.zeros((4, 5)))
        with pytest.raises(ValueError):
            DenseOp(np.zeros((2, 3))).adjoint(np.zeros(3))

    def test_batched_matches_loop(self):
        op = BlurOp((8, 8), 1.0, 5)
        X = RngStream(4).normal((3, 8, 8))
        np.testing.assert_allclose(op.apply(X), np.stack([op.apply(x) for x in X]), atol=1e-15)

    def test_dense_matvec_and_transpose(self):
        rng = RngStream(5)
        M = rng.normal((4, 6))
        x, y = rng.normal((6,)), rng.normal((4,))
        op = DenseOp(M)
        np.testing.assert_allclose(op.apply(x), M @ x, rtol=1e-14)
        np.testing.assert_allclose(op.adjoint(y), M.T @ y, rtol=1e-14)

    def test_blur_preserves_mean(self):
        x = RngStream(6).uniform((10, 10))
        assert BlurOp((10, 10)).apply(x).sum() == pytest.approx(x.sum(), rel=1e-13)

    def test_make_operator(self):
        assert make_operator({"kind": "identity"}, (3, 3)).kind == "identity"
        op = make_operator({"kind": "radon", "num_angles": 10, "num_bins": 48}, (24, 24))
        assert op.range_shape == (10, 48)
        with pytest.raises(ValueError):
            make_operator({"kind": "fan"}, (3, 3))


class TestRadon:
    def test_geometry_validation(self):
        with pytest.raises(ValueError):
            RadonGeometry(32, 0, 64)
        with pytest.raises(ValueError):
            RadonGeometry(32, 45, 16, bin_spacing=1.0)  # 16 bins cannot cover the diagonal

    def test_angles_uniform_on_half_turn(self):
        a = RadonGeometry(32, 45, 64).angles
        np.testing.assert_allclose(np.diff(a), np.pi / 45)
        assert a[0] == 0.0 and a[-1] < np.pi

    def test_disk_rotational_symmetry(self):
        # Compared as the L2 deviation of each projection from the angular
        # mean, relative to the mean projection's norm.
        g = RadonGeometry(32, 45, 64)
        sino = RadonOp(g).apply(_disk(32, 10.0))
        mean = sino.mean(axis=0)
        dev = np.linalg.norm(sino - mean, axis=1) / np.linalg.norm(mean)
        assert dev.max() <= 0.02

    def test_mass_consistency(self):
        g = RadonGeometry(32, 45, 64)
        x = ellipse_phantoms(1, 32, RngStream(7))[0] * _disk(32, 14.0)
        sino = RadonOp(g).apply(x)
        mass = x.sum() * g.step / g.spacing
        np.testing.assert_allclose(sino.sum(axis=1), mass, rtol=0.01)


class TestPinv:
    def test_identity(self):
        g = RngStream(8).normal((5, 5))
        res = pinv_adjoint_apply(IdentityOp((5, 5)), g)
        np.testing.assert_allclose(res.w, g, atol=1e-14)

    def test_scaled_identity(self):
        g = RngStream(9).normal((5, 5))
        res = pinv_adjoint_apply(ScaledIdentityOp((5, 5), 0.5), g)
        np.testing.assert_allclose(res.w, 2 * g, atol=1e-13)

    def test_dense_5x8(self):
        rng = RngStream(10)
        M = rng.normal((5, 8))
        g = rng.normal((8,))
        res = pinv_adjoint_apply(DenseOp(M), g, tol=1e-14)
        np.testing.assert_allclose(res.w, np.linalg.pinv(M.T) @ g, atol=1e-8)
        assert res.residual == pytest.approx(np.linalg.norm(M.T @ res.w - g), abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_svd_oracle(self, seed):
        rng = RngStream(200 + seed)
        m, n = 3 + seed % 4, 7 + seed % 5
        M = rng.normal((m, n))
        g = rng.normal((n,))
        res = pinv_adjoint_apply(DenseOp(M), g, tol=1e-14)
        assert np.max(np.abs(res.w - np.linalg.pinv(M.T) @ g)) <= 1e-8

    @pytest.mark.parametrize("op", [DenseOp(RngStream(11).normal((6, 9))), BlurOp((12, 12), 1.0, 5)], ids=["dense", "blur"])
    def test_left_inverse_on_range_of_adjoint(self, op):
        w0 = RngStream(12).normal(op.range_shape)
        w = pinv_adjoint_apply(op, op.adjoint(w0), tol=1e-12).w
        assert np.linalg.norm(w - w0) <= 1e-6 * np.linalg.norm(w0)

    def test_pinv_apply_dense(self):
        rng = RngStream(13)
        M = rng.normal((4, 7))
        y = rng.normal((4,))
        x, ok = pinv_apply(DenseOp(M), y, tol=1e-14)
        assert ok
        np.testing.assert_allclose(x, np.linalg.pinv(M) @ y, atol=1e-9)

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            pinv_adjoint_apply(IdentityOp((3, 3)), np.zeros(9))

    def test_factors_match_numpy_pinv(self):
        M = RngStream(14).normal((5, 9))
        g = RngStream(15).normal((9,))
        f = pinv_factors(DenseOp(M))
        assert f.V.shape == (9, 5)
        assert np.linalg.norm(g @ f.V / f.s) == pytest.approx(np.linalg.norm(np.linalg.pinv(M.T) @ g), rel=1e-12)
        # A^+ (A^+)^* g via the factors
        P = np.linalg.pinv(M)
        np.testing.assert_allclose(f.V @ ((g @ f.V) / f.s**2), P @ P.T @ g, atol=1e-12)

    def test_factors_rank_truncation_and_cache(self):
        M = np.vstack([RngStream(16).normal((3, 6))] * 2)
        A = DenseOp(M)
        f = pinv_factors(A)
        assert f.s.size == 3
        assert pinv_factors(A) is f
        with pytest.raises(ValueError):
            pinv_factors(IdentityOp((100, 100)))


class TestFbp:
    geom = RadonGeometry(32, 45, 64)

    def test_zero(self):
        np.testing.assert_array_equal(fbp(np.zeros((45, 64)), self.geom), np.zeros((32, 32)))

    def test_linear(self):
        rng = RngStream(14)
        s1, s2 = rng.normal((45, 64)), rng.normal((45, 64))
        np.testing.assert_allclose(fbp(s1 + s2, self.geom), fbp(s1, self.geom) + fbp(s2, self.geom), atol=1e-10)

    def test_geometry_mismatch(self):
        with pytest.raises(ValueError):
            fbp(np.zeros((44, 64)), self.geom)

    def test_phantom_regression_pin(self):
        # reference run (seed 11, four phantoms): 33.83, 34.33, 31.69, 33.10 dB
        g = RadonGeometry(32, 90, 64)
        ph = ellipse_phantoms(4, 32, RngStream(11))
        rec = fbp(RadonOp(g).apply(ph), g)
        vals = [psnr(r, p) for r, p in zip(rec, ph)]
        np.testing.assert_allclose(vals, [33.832, 34.333, 31.690, 33.096], atol=0.01)


class TestBackends:
    def test_cython_and_numpy_agree(self):
        g = RadonGeometry(16, 7, 32)
        op = RadonOp(g)
        x = RngStream(15).normal((2, 16, 16))
        y = RngStream(16).normal((2, 7, 32))
        from acrsc import _kernels_py as py

        args = (np.cos(g.angles), np.sin(g.angles), g.bin_centers, g.ray_steps, g.step)
        np.testing.assert_allclose(py.radon_forward(x, *args), op.apply(x), rtol=1e-13, atol=1e-13)
        np.testing.assert_allclose(py.radon_adjoint(y, 16, *args), op.adjoint(y), rtol=1e-13, atol=1e-13)
        z, s, s2 = py.softplus_all(x, 5.0)
        z2, s_2, s2_2 = kernels.softplus_all(x, 5.0)
        np.testing.assert_allclose(z, z2, rtol=1e-14)
        np.testing.assert_allclose(s2, s2_2, rtol=1e-14)

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_im2col_agrees(self, k):
        from acrsc import _kernels_py as py

        x = RngStream(17).normal((2, 6, 5, 3))
        np.testing.assert_array_equal(kernels.im2col(x, k), py.im2col(x, k))
        # centre column of each channel block is the pixel itself
        c = (k * k) // 2
        np.testing.assert_array_equal(py.im2col(x, k)[:, c :: k * k], x.reshape(-1, 3))

    def test_env_forces_fallback(self):
        env = dict(os.environ, ACRSC_PURE_PYTHON="1")
        out = subprocess.run(
            [sys.executable, "-c", "from acrsc import kernels; print(kernels.BACKEND)"],
            env=env, capture_output=True, text=True, check=True,
        )
        assert out.stdout.strip() == "python"
