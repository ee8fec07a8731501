"""Variational reconstruction ``argmin 1/2 ||Ax - y||^2 + lam * psi(x)`` by
gradient descent and Bregman iteration, plus the convergence-rate sweep.

Solvers accept one measurement or a stack with a leading batch axis; each
image in a stack is solved independently (traces then have one column per
image).
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from pathlib import Path

import numpy as np

from .numerics import RngStream, cg_solve
from .operators import DenseOp, ForwardOp, RadonOp, fbp
from .regularizers import QuadraticTestRegularizer, Regularizer, bregman_distance

__all__ = [
    "SolveConfig",
    "SolveReport",
    "SolverDivergedError",
    "solve_gd",
    "solve_bregman",
    "solve_tikhonov",
    "estimate_opnorm_sq",
    "RateSweepCase",
    "quadratic_case",
    "rate_sweep",
    "fit_loglog_slope",
    "write_rate_csv",
    "write_trace_csv",
]


@dataclass
class SolveConfig:
    lam: float = 5.0
    step_size: float = 0.01
    max_iters: int = 300
    inner_iters: int = 100
    outer_iters: int = 10
    init: str = "zero"  # zero | adjoint | fbp | given
    x0: np.ndarray | None = None
    snapshot_stride: int = 0
    tau: float = 1.0
    delta: float | None = None  # noise norm for the discrepancy principle
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.lam <= 0 or self.step_size <= 0:
            raise ValueError("lam and step_size must be positive")
        if self.max_iters < 1 or self.inner_iters < 1 or self.outer_iters < 1:
            raise ValueError("iteration counts must be positive")
        if self.init not in ("zero", "adjoint", "fbp", "given"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "given" and self.x0 is None:
            raise ValueError("init='given' needs x0")


@dataclass
class SolveReport:
    x_final: np.ndarray
    objective: np.ndarray  # (iters + 1,) or (iters + 1, batch)
    residual: np.ndarray  # ||Ax - y|| per iterate, same layout
    snapshots: list = field(default_factory=list)  # (iteration, x) pairs
    converged: bool | np.ndarray = True
    diverged: bool = False
    outer_selected: np.ndarray | None = None  # Bregman: chosen outer index per image
    lipschitz_estimate: float | None = None


class SolverDivergedError(RuntimeError):
    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


def _initial(A: ForwardOp, Y: np.ndarray, cfg: SolveConfig) -> np.ndarray:
    n = len(Y)
    if cfg.init == "zero":
        return np.zeros((n,) + A.domain_shape)
    if cfg.init == "adjoint":
        return A.adjoint(Y)
    if cfg.init == "fbp":
        if not isinstance(A, RadonOp):
            raise ValueError("fbp init needs a Radon operator")
        return fbp(Y, A.geometry)
    x0 = np.asarray(cfg.x0, dtype=np.float64)
    return np.broadcast_to(x0, (n,) + A.domain_shape).copy() if x0.shape == A.domain_shape else x0.copy()


def _sumsq(a):
    return np.sum(a.reshape(len(a), -1) ** 2, axis=1)


def _inner(a, b):
    return np.sum((a * b).reshape(len(a), -1), axis=1)


def _gd_core(A, Y, reg, lam, step, iters, X, P, stride, div_factor, snap_offset=0):
    """Gradient descent on ``1/2||Ax-y||^2 + lam (psi(x) - <p, x>)``.

    Returns the best-objective iterate per image and the traces.
    """
    n = len(Y)
    obj = np.empty((iters + 1, n))
    res = np.empty((iters + 1, n))
    snaps = []
    best_x = X.copy()
    best_f = np.full(n, np.inf)
    diverged = False
    for it in range(iters + 1):
        r = A.apply(X) - Y
        val, g = reg.value_and_grad(X)
        f = 0.5 * _sumsq(r) + lam * np.asarray(val)
        if P is not None:
            f = f - lam * _inner(P, X)
        obj[it] = f
        res[it] = np.sqrt(_sumsq(r))
        if not np.all(np.isfinite(f)):
            diverged = True
        better = f < best_f
        best_f = np.where(better, f, best_f)
        best_x[better] = X[better]
        if stride and it % stride == 0:
            snaps.append((snap_offset + it, X.copy()))
        if it > 0 and np.any((obj[0] > 0) & (f > div_factor * obj[0])):
            diverged = True
        if diverged:
            obj, res = obj[: it + 1], res[: it + 1]
            break
        if it == iters:
            break
        grad = A.adjoint(r) + lam * g
        if P is not None:
            grad = grad - lam * P
        X = X - step * grad
    return best_x, obj, res, snaps, diverged


def _split(A, y):
    y = np.asarray(y, dtype=np.float64)
    if y.shape == A.range_shape:
        return y[None], False
    if y.shape[1:] == A.range_shape:
        return y, True
    raise ValueError(f"measurement shape {y.shape} does not match range {A.range_shape}")


def _shape_report(rep: SolveReport, batched: bool) -> SolveReport:
    if not batched:
        rep.x_final = rep.x_final[0]
        rep.objective = rep.objective[:, 0]
        rep.residual = rep.residual[:, 0]
        rep.snapshots = [(i, x[0]) for i, x in rep.snapshots]
        if isinstance(rep.converged, np.ndarray):
            rep.converged = bool(rep.converged[0])
        if rep.outer_selected is not None:
            rep.outer_selected = int(rep.outer_selected[0])
    return rep


def solve_gd(A: ForwardOp, y, reg: Regularizer, cfg: SolveConfig) -> SolveReport:
    """Fixed-step gradient descent; returns the best-objective iterate.

    Raises :class:`SolverDivergedError` (carrying the partial report) if the
    objective exceeds ``divergence_factor`` times its initial value.
    """
    Y, batched = _split(A, y)
    X0 = _initial(A, Y, cfg)
    best, obj, res, snaps, diverged = _gd_core(
        A, Y, reg, cfg.lam, cfg.step_size, cfg.max_iters, X0, None, cfg.snapshot_stride, cfg.divergence_factor
    )
    rep = SolveReport(best, obj, res, snaps, converged=not diverged, diverged=diverged)
    rep = _shape_report(rep, batched)
    if diverged:
        raise SolverDivergedError("gradient descent diverged", rep)
    return rep


def solve_bregman(A: ForwardOp, y, reg: Regularizer, cfg: SolveConfig) -> SolveReport:
    """Bregman iteration with inner gradient descent (warm-started).

    ``p_0 = 0``; ``x_{k+1}`` minimizes ``1/2||Ax-y||^2 + lam (psi(x) - <p_k, x>)``
    with ``inner_iters`` GD steps; ``p_{k+1} = p_k + A*(y - A x_{k+1}) / lam``.
    With ``cfg.delta`` set, each image stops at the first outer iterate with
    ``||A x - y|| <= tau * delta``; otherwise the last outer iterate is
    returned.  Snapshots hold every outer iterate.
    """
    Y, batched = _split(A, y)
    n = len(Y)
    X = _initial(A, Y, cfg)
    P = np.zeros_like(X)
    selected = np.full(n, -1)
    out = X.copy()
    objs, ress, snaps = [], [], []
    diverged = False
    for k in range(cfg.outer_iters):
        X, obj, res, _, div = _gd_core(
            A, Y, reg, cfg.lam, cfg.step_size, cfg.inner_iters, X, P, 0, cfg.divergence_factor
        )
        objs.append(obj)
        ress.append(res)
        if div:
            diverged = True
            break
        r = Y - A.apply(X)
        rnorm = np.sqrt(_sumsq(r))
        snaps.append((k + 1, X.copy()))
        active = selected < 0
        if cfg.delta is not None:
            hit = active & (rnorm <= cfg.tau * cfg.delta)
            out[hit] = X[hit]
            selected[hit] = k + 1
            if np.all(selected >= 0):
                break
        else:
            out, selected[:] = X.copy(), k + 1
        P = P + A.adjoint(r) / cfg.lam
    left = selected < 0
    out[left] = X[left]
    converged = ~left if cfg.delta is not None else np.ones(n, dtype=bool)
    selected[left] = len(snaps)
    rep = SolveReport(
        out,
        np.concatenate(objs),
        np.concatenate(ress),
        snaps,
        converged=converged,
        diverged=diverged,
        outer_selected=selected,
    )
    rep = _shape_report(rep, batched)
    if diverged:
        raise SolverDivergedError("inner gradient descent diverged", rep)
    return rep


def solve_tikhonov(A: ForwardOp, y, lam: float, tol: float = 1e-13, max_iter: int = 2000):
    """Minimizer for the quadratic regularizer: CG on ``(A*A + lam I) x = A* y``."""
    y = np.asarray(y, dtype=np.float64)
    x, ok, _ = cg_solve(lambda v: A.adjoint(A.apply(v)) + lam * v, A.adjoint(y), tol, max_iter)
    return x, ok


def estimate_opnorm_sq(A: ForwardOp, rng: RngStream, iters: int = 50) -> float:
    """Power-iteration estimate of ``||A||^2`` (Lipschitz constant of the data term)."""
    x = np.asarray(rng.normal(A.domain_shape))
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        x = A.adjoint(A.apply(x))
        lam = float(np.linalg.norm(x))
        if lam == 0.0:
            return 0.0
        x /= lam
    return lam


# ---------------------------------------------------------------------------
# convergence-rate sweep


@dataclass
class RateSweepCase:
    A: ForwardOp
    w_tilde: np.ndarray
    x_tilde: np.ndarray
    deltas: np.ndarray
    c: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if self.deltas.size == 0:
            raise ValueError("empty delta grid")
        if np.any(self.deltas < 0):
            raise ValueError("deltas must be nonnegative")
        if self.c <= 0:
            raise ValueError("c must be positive")


def quadratic_case(
    m: int = 400,
    n: int = 600,
    seed: int = 0,
    s_min: float = 1e-3,
    s_max: float = 3.0,
    deltas=None,
    c: float = 1.0,
) -> RateSweepCase:
    """Dense full-row-rank ``A = U diag(s) V^T`` with log-spaced singular
    values and ``x~ = A^T w~`` for ``psi = ||x||^2 / 2``, so ``A* w~ = grad psi(x~)``."""
    if m > n:
        raise ValueError("need m <= n for full row rank")
    rng = RngStream(seed)
    U, _ = np.linalg.qr(np.asarray(rng.normal((m, m))))
    V, _ = np.linalg.qr(np.asarray(rng.normal((n, m))))
    s = np.logspace(math.log10(s_min), math.log10(s_max), m)
    A = DenseOp((U * s) @ V.T)
    w = np.asarray(rng.normal((m,)))
    w /= np.linalg.norm(w)
    x = A.adjoint(w)
    if deltas is None:
        deltas = np.logspace(-3, -1, 9)
    return RateSweepCase(A, w, x, deltas, c, seed + 1)


def _rate_row(case, reg, solver, solve_cfg, i, delta, y0, wnorm2):
    rng = RngStream(case.seed).spawn(i)
    e = np.asarray(rng.normal(case.A.range_shape))
    e = e * (delta / np.linalg.norm(e)) if delta > 0 else np.zeros_like(e)
    y = y0 + e
    lam = float(case.c * delta if delta > 0 else case.c)
    converged = True
    if solver == "tikhonov":
        x, converged = solve_tikhonov(case.A, y, lam)
    else:
        cfg = solve_cfg or SolveConfig(lam=lam)
        cfg = SolveConfig(**{**cfg.__dict__, "lam": lam})
        try:
            x = solve_gd(case.A, y, reg, cfg).x_final
        except SolverDivergedError as exc:
            x, converged = exc.report.x_final, False
    d = float(bregman_distance(reg, x, case.x_tilde))
    bound = lam * wnorm2 / 2.0 + delta**2 / (2.0 * lam)
    resid = float(np.linalg.norm(case.A.apply(x) - y))
    return {"delta": float(delta), "lambda": lam, "bregman_d": d, "bound": bound, "residual": resid, "converged": bool(converged)}


def rate_sweep(
    case: RateSweepCase,
    reg: Regularizer,
    solver: str = "tikhonov",
    solve_cfg: SolveConfig | None = None,
    threads: int = 1,
):
    """One row per noise level with ``lam = c * delta``.

    Row ``i`` draws its noise from stream ``spawn(i)`` of ``case.seed`` and
    rescales it so ``||e|| = delta`` exactly, so rows are independent and
    may run on ``threads`` workers with identical results.  The Bregman
    distance ``d = D_psi(x_lam, x~)`` is compared with
    ``lam ||w~||^2 / 2 + delta^2 / (2 lam)``.  A ``delta = 0`` row uses ``lam = c``.
    """
    if solver not in ("tikhonov", "gd"):
        raise ValueError(f"unknown solver {solver!r}")
    if solver == "tikhonov" and not isinstance(reg, QuadraticTestRegularizer):
        raise ValueError("the tikhonov solver is only exact for the quadratic regularizer")
    y0 = case.A.apply(case.x_tilde)
    wnorm2 = float(np.vdot(case.w_tilde, case.w_tilde))
    jobs = [(i, float(d)) for i, d in enumerate(case.deltas)]
    run = lambda job: _rate_row(case, reg, solver, solve_cfg, job[0], job[1], y0, wnorm2)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, jobs))
    return [run(job) for job in jobs]


def fit_loglog_slope(rows) -> float:
    """Least-squares slope of ``log d`` against ``log delta`` over rows with ``delta > 0``."""
    pts = [(r["delta"], r["bregman_d"]) for r in rows if r["delta"] > 0 and r["bregman_d"] > 0]
    if len(pts) < 2:
        return float("nan")
    ld = np.log([p[0] for p in pts])
    lb = np.log([p[1] for p in pts])
    return float(np.polyfit(ld, lb, 1)[0])


RATE_COLUMNS = ("delta", "lambda", "bregman_d", "bound", "residual", "converged")


def write_rate_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RATE_COLUMNS)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in RATE_COLUMNS])
    return Path(path)


def write_trace_csv(path, report: SolveReport):
    """Objective and residual trace; one row per iteration (and per image)."""
    obj = np.asarray(report.objective)
    res = np.asarray(report.residual)
    if obj.ndim == 1:
        obj, res = obj[:, None], res[:, None]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("iteration", "image", "objective", "residual"))
        for it in range(obj.shape[0]):
            for j in range(obj.shape[1]):
                w.writerow((it, j, repr(float(obj[it, j])), repr(float(res[it, j]))))
