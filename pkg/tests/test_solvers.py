import csv

import numpy as np
import pytest

from acrsc.numerics import RngStream
from acrsc.operators import BlurOp, DenseOp, IdentityOp
from acrsc.regularizers import HuberTvRegularizer, QuadraticTestRegularizer, ZeroRegularizer
from acrsc.solvers import (
    RATE_COLUMNS,
    RateSweepCase,
    SolveConfig,
    SolverDivergedError,
    estimate_opnorm_sq,
    fit_loglog_slope,
    quadratic_case,
    rate_sweep,
    solve_bregman,
    solve_gd,
    solve_tikhonov,
    write_rate_csv,
    write_trace_csv,
)


class TestSolveConfig:
    @pytest.mark.parametrize("kw", [{"lam": 0}, {"step_size": -1}, {"max_iters": -1}, {"init": "random"}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            SolveConfig(**kw)


class TestGradientDescent:
    def test_least_squares_identity(self):
        y = RngStream(1).uniform((5, 5))
        rep = solve_gd(IdentityOp((5, 5)), y, ZeroRegularizer((5, 5)), SolveConfig(lam=1.0, step_size=0.5, max_iters=200))
        assert np.max(np.abs(rep.x_final - y)) <= 1e-8

    def test_quadratic_identity_closed_form(self):
        y = RngStream(2).uniform((6, 6))
        rep = solve_gd(IdentityOp((6, 6)), y, QuadraticTestRegularizer((6, 6)), SolveConfig(lam=5.0, step_size=0.1, max_iters=300))
        np.testing.assert_allclose(rep.x_final, y / 6, atol=1e-6)

    def test_dense_tikhonov_oracle(self):
        rng = RngStream(3)
        M = rng.normal((6, 10)) / np.sqrt(10)
        y = rng.normal((6,))
        lam = 0.5
        direct = np.linalg.solve(M.T @ M + lam * np.eye(10), M.T @ y)
        L = np.linalg.norm(M, 2) ** 2 + lam
        rep = solve_gd(DenseOp(M), y, QuadraticTestRegularizer((10,)), SolveConfig(lam=lam, step_size=1 / L, max_iters=3000))
        np.testing.assert_allclose(rep.x_final, direct, atol=1e-6)
        x_cg, ok = solve_tikhonov(DenseOp(M), y, lam)
        assert ok
        np.testing.assert_allclose(x_cg, direct, atol=1e-10)

    def test_monotone_objective_with_safe_step(self):
        A = BlurOp((12, 12), 1.0, 5)
        reg = HuberTvRegularizer((12, 12), mu=0.05)
        lam = 0.1
        L = estimate_opnorm_sq(A, RngStream(4)) + lam * reg.grad_lipschitz
        y = A.apply(RngStream(5).uniform((3, 12, 12))) + 0.05 * RngStream(6).normal((3, 12, 12))
        rep = solve_gd(A, y, reg, SolveConfig(lam=lam, step_size=1 / L, max_iters=150))
        assert np.all(np.diff(rep.objective, axis=0) <= 1e-10)

    def test_batch_matches_single(self):
        A = IdentityOp((4, 4))
        reg = HuberTvRegularizer((4, 4))
        Y = RngStream(7).uniform((2, 4, 4))
        cfg = SolveConfig(lam=0.2, step_size=0.01, max_iters=20)
        both = solve_gd(A, Y, reg, cfg).x_final
        np.testing.assert_allclose(both[1], solve_gd(A, Y[1], reg, cfg).x_final, atol=1e-15)

    def test_divergence_detected(self):
        y = RngStream(8).uniform((4, 4))
        with pytest.raises(SolverDivergedError) as info:
            solve_gd(IdentityOp((4, 4)), y, QuadraticTestRegularizer((4, 4)), SolveConfig(lam=1.0, step_size=5.0, max_iters=50))
        assert info.value.report.diverged

    def test_snapshots(self):
        y = RngStream(9).uniform((4, 4))
        rep = solve_gd(IdentityOp((4, 4)), y, ZeroRegularizer((4, 4)), SolveConfig(step_size=0.1, max_iters=10, snapshot_stride=5))
        assert [i for i, _ in rep.snapshots] == [0, 5, 10]
        assert len(rep.objective) == 11

    def test_degenerate_regularization(self):
        y = RngStream(10).uniform((5, 5))
        rep = solve_gd(IdentityOp((5, 5)), y, HuberTvRegularizer((5, 5)), SolveConfig(lam=1e-6, step_size=0.5, max_iters=100))
        assert np.max(np.abs(rep.x_final - y)) <= 1e-3


class TestBregman:
    def test_first_outer_equals_gd(self):
        A = BlurOp((8, 8), 1.0, 5)
        reg = HuberTvRegularizer((8, 8), mu=0.05)
        y = RngStream(11).uniform((2, 8, 8))
        gd = solve_gd(A, y, reg, SolveConfig(lam=0.3, step_size=0.05, max_iters=40))
        br = solve_bregman(A, y, reg, SolveConfig(lam=0.3, step_size=0.05, inner_iters=40, outer_iters=1))
        np.testing.assert_array_equal(br.x_final, gd.x_final)

    def test_quadratic_recursion(self):
        lam = 3.0
        y = RngStream(12).uniform((5, 5))
        cfg = SolveConfig(lam=lam, step_size=1 / (1 + lam), inner_iters=1, outer_iters=6)
        rep = solve_bregman(IdentityOp((5, 5)), y, QuadraticTestRegularizer((5, 5)), cfg)
        p = np.zeros_like(y)
        for k, xk in rep.snapshots:
            x = (y + lam * p) / (1 + lam)
            np.testing.assert_allclose(xk, x, atol=1e-10)
            p = p + (y - x) / lam
        assert len(rep.snapshots) == 6

    def test_noise_free_distance_decreases(self):
        y = RngStream(13).uniform((6, 6))
        cfg = SolveConfig(lam=2.0, step_size=1 / 3, inner_iters=5, outer_iters=8)
        rep = solve_bregman(IdentityOp((6, 6)), y, QuadraticTestRegularizer((6, 6)), cfg)
        dist = [np.linalg.norm(x - y) for _, x in rep.snapshots]
        assert all(b < a for a, b in zip(dist, dist[1:]))

    def test_discrepancy_stop(self):
        y = RngStream(14).uniform((2, 6, 6))
        delta = 0.5
        cfg = SolveConfig(lam=2.0, step_size=1 / 3, inner_iters=5, outer_iters=20, delta=delta)
        rep = solve_bregman(IdentityOp((6, 6)), y, QuadraticTestRegularizer((6, 6)), cfg)
        for j in range(2):
            k = rep.outer_selected[j]
            res = [np.linalg.norm(x[j] - y[j]) for _, x in rep.snapshots]
            assert res[k - 1] <= delta
            assert all(r > delta for r in res[: k - 1])
            np.testing.assert_array_equal(rep.x_final[j], rep.snapshots[k - 1][1][j])
        assert np.all(rep.converged)


class TestRateSweep:
    def test_bound_and_slope(self):
        case = quadratic_case()
        rows = rate_sweep(case, QuadraticTestRegularizer(case.A.domain_shape))
        for r in rows:
            assert r["bregman_d"] <= r["bound"] + 1e-9
            assert r["converged"]
        assert 0.85 <= fit_loglog_slope(rows) <= 1.15

    def test_zero_delta_row(self):
        case = quadratic_case(m=40, n=60, deltas=[0.0])
        reg = QuadraticTestRegularizer((60,))
        wn = float(np.sum(case.w_tilde**2))
        big = rate_sweep(case, reg)[0]
        assert big["bregman_d"] <= big["lambda"] * wn / 2 + 1e-12
        small = rate_sweep(RateSweepCase(case.A, case.w_tilde, case.x_tilde, [0.0], c=1e-4), reg)[0]
        assert small["bregman_d"] < 1e-3 * big["bregman_d"]

    def test_huge_c_bound_dominated_by_source_term(self):
        case = quadratic_case(m=40, n=60, deltas=[1e-2], c=1e4)
        r = rate_sweep(case, QuadraticTestRegularizer((60,)))[0]
        src = r["lambda"] * float(np.sum(case.w_tilde**2)) / 2
        assert src / r["bound"] > 0.999999
        assert r["bregman_d"] <= r["bound"]

    def test_threads_do_not_change_rows(self):
        case = quadratic_case(m=30, n=40, deltas=[1e-3, 1e-2, 1e-1])
        reg = QuadraticTestRegularizer((40,))
        assert rate_sweep(case, reg, threads=3) == rate_sweep(case, reg)

    def test_empty_grid(self):
        case = quadratic_case(m=4, n=6)
        with pytest.raises(ValueError):
            RateSweepCase(case.A, case.w_tilde, case.x_tilde, [])

    def test_gd_solver_matches_tikhonov(self):
        case = quadratic_case(m=20, n=30, s_min=0.3, s_max=1.0, deltas=[0.1])
        reg = QuadraticTestRegularizer((30,))
        cfg = SolveConfig(step_size=0.5, max_iters=2000)
        a = rate_sweep(case, reg, "gd", cfg)[0]
        b = rate_sweep(case, reg, "tikhonov")[0]
        assert a["bregman_d"] == pytest.approx(b["bregman_d"], rel=1e-6)

    def test_csv_writers(self, tmp_path):
        case = quadratic_case(m=10, n=12, deltas=[1e-2, 1e-1])
        rows = rate_sweep(case, QuadraticTestRegularizer((12,)))
        write_rate_csv(tmp_path / "r.csv", rows)
        with open(tmp_path / "r.csv") as f:
            got = list(csv.DictReader(f))
        assert tuple(got[0]) == RATE_COLUMNS
        assert float(got[1]["lambda"]) == rows[1]["lambda"]
        rep = solve_gd(IdentityOp((3,)), np.ones(3), ZeroRegularizer((3,)), SolveConfig(step_size=0.1, max_iters=4))
        write_trace_csv(tmp_path / "t.csv", rep)
        assert len((tmp_path / "t.csv").read_text().splitlines()) == 6
