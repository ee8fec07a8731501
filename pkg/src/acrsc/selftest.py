"""Built-in oracle suites run by ``acrsc selftest``.

Each suite returns ``(passed, detail)``.  ``fault="adjoint"`` swaps the blur
operator's adjoint for a shifted one so the dot-test suite must fail.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import icnn
from .icnn import IcnnArchitecture, IcnnParams, init_params
from .numerics import RngStream, cg_least_squares
from .operators import BlurOp, DenseOp, ForwardOp, IdentityOp, RadonGeometry, RadonOp, ScaledIdentityOp, dot_test
from .training import AdamState, TrainConfig, adam_step, loss_eq3, sc_penalty

__all__ = ["SUITES", "run_selftest"]


class _ShiftedAdjoint(ForwardOp):
    """Wraps an operator with a deliberately wrong adjoint (test hook)."""

    def __init__(self, op):
        super().__init__(op.domain_shape, op.range_shape)
        self.op = op
        self.kind = op.kind

    def _apply(self, x):
        return self.op._apply(x)

    def _adjoint(self, y):
        return np.roll(self.op._adjoint(y), 1, axis=-1)


def _operators(fault):
    rng = RngStream(11)
    blur = BlurOp((16, 16), 1.0, 5)
    return {
        "identity": IdentityOp((8, 8)),
        "scaled_identity": ScaledIdentityOp((8, 8), 0.5),
        "blur": _ShiftedAdjoint(blur) if fault == "adjoint" else blur,
        "dense": DenseOp(rng.normal((5, 8))),
        "radon": RadonOp(RadonGeometry(32, 45, 64)),
    }


def suite_dot_tests(fault=None):
    worst = {k: dot_test(op, RngStream(1), trials=10) for k, op in _operators(fault).items()}
    bad = [k for k, v in worst.items() if v > 1e-10]
    detail = f"max rel. mismatch {max(worst.values()):.1e}"
    if bad:
        detail += f"; failing: {', '.join(bad)}"
    return not bad, detail


def _small_nets():
    conv = IcnnArchitecture("conv", (7, 7), num_layers=3, width=3, kernel_size=3, beta=2.0)
    dense = IcnnArchitecture("dense", (12,), num_layers=2, width=5, beta=2.0)
    return conv, dense


def _perturbed(arch, seed):
    p = init_params(arch, RngStream(seed))
    rng = RngStream(seed + 1000)
    return IcnnParams(arch, {k: v + (0.3 * rng.normal(v.shape) if k.startswith("b") else 0.0) for k, v in p.tensors.items()})


def suite_convexity(trials=1000):
    violations = 0
    for arch in _small_nets():
        p = _perturbed(arch, 3)
        p = IcnnParams(arch, {k: (3 * v if not k.startswith("b") else v) for k, v in p.tensors.items()})
        rng = RngStream(4)
        X1 = 2 * rng.normal((trials,) + arch.input_shape)
        X2 = 2 * rng.normal((trials,) + arch.input_shape)
        a = rng.uniform((trials,)).reshape((trials,) + (1,) * len(arch.input_shape))
        mid = icnn.psi_values(p, a * X1 + (1 - a) * X2)
        a1 = a.reshape(trials)
        chord = a1 * icnn.psi_values(p, X1) + (1 - a1) * icnn.psi_values(p, X2)
        violations += int(np.sum(mid > chord + 1e-9))
        d = icnn.psi_input_grads(p, X1) - icnn.psi_input_grads(p, X2)
        violations += int(np.sum(np.sum((d * (X1 - X2)).reshape(trials, -1), axis=1) < -1e-9))
    return violations == 0, f"{2 * trials} midpoint and monotonicity trials per net, {violations} violations"


def _fd(f, theta, h=1e-6):
    out = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def _flat(g):
    return np.concatenate([t.ravel() for t in g.values()])


def gradient_errors(arch, seed):
    """Relative FD errors of every derivative routine on one seeded net."""
    p = _perturbed(arch, seed)
    rng = RngStream(seed + 1)
    x, v = rng.normal(arch.input_shape), rng.normal(arch.input_shape)
    theta = p.flat()
    errs = {}
    gx = icnn.psi_input_grad(p, x)
    errs["psi_input_grad"] = _rel(gx, _fd(lambda z: icnn.psi_forward(p, z.reshape(x.shape)), x.ravel(), 1e-5).reshape(x.shape))
    errs["psi_param_grad"] = _rel(_flat(icnn.psi_param_grad(p, x)), _fd(lambda t: icnn.psi_forward(p.with_flat(t), x), theta))
    g_v = lambda t: float(np.vdot(icnn.psi_input_grad(icnn.project_feasible(p.with_flat(t)), x), v))
    errs["input_grad_vjp"] = _rel(_flat(icnn.input_grad_vjp(p, x, v)), _fd(g_v, theta))
    if len(arch.input_shape) == 2:
        A = BlurOp(arch.input_shape, 1.0, 3)
    else:
        n = arch.input_shape[0]
        A = DenseOp(rng.normal((max(1, 2 * n // 3), n)))
    cfg = TrainConfig(cg_tol=1e-13, cg_max_iter=500)
    X = rng.normal((2,) + arch.input_shape)
    Z = rng.normal((2,) + arch.input_shape)
    _, g_sc, _ = sc_penalty(p, X, A, cfg)
    errs["sc_penalty"] = _rel(_flat(g_sc), _fd(lambda t: sc_penalty(p.with_flat(t), X, A, cfg, want_grad=False)[0], theta))
    _, g_l, _ = loss_eq3(p, X, Z, cfg, A, RngStream(seed + 2))
    errs["loss_eq3"] = _rel(_flat(g_l), _fd(lambda t: loss_eq3(p.with_flat(t), X, Z, cfg, A, RngStream(seed + 2))[0], theta))
    return errs


def suite_gradients(seeds=(0, 1)):
    worst = 0.0
    limits = {"psi_input_grad": 1e-6, "psi_param_grad": 1e-5, "input_grad_vjp": 1e-4, "sc_penalty": 1e-4, "loss_eq3": 1e-4}
    bad = set()
    for arch in _small_nets():
        for s in seeds:
            for k, e in gradient_errors(arch, s).items():
                worst = max(worst, e)
                if e > limits[k]:
                    bad.add(k)
    detail = f"worst rel. FD error {worst:.1e}"
    if bad:
        detail += f"; failing: {', '.join(sorted(bad))}"
    return not bad, detail


def suite_cg_svd(cases=20):
    worst = 0.0
    for c in range(cases):
        rng = RngStream(500 + c)
        M = rng.normal((3 + c % 4, 7 + c % 5))
        g = rng.normal((M.shape[1],))
        res = cg_least_squares(lambda y: M.T @ y, lambda x: M @ x, g, tol=1e-14)
        worst = max(worst, float(np.max(np.abs(res.w - np.linalg.pinv(M.T) @ g))))
    return worst <= 1e-8, f"{cases} dense cases, max abs. error {worst:.1e}"


def suite_adam():
    cfg = TrainConfig(eta=0.1)
    arch = IcnnArchitecture("dense", (1,), num_layers=1, width=1)
    start = {"wx0": 0.3, "b0": -0.2, "readout": 0.5}
    p = IcnnParams(arch, {"wx0": np.array([[0.3]]), "b0": np.array([-0.2]), "readout": np.array([0.5])})
    state = AdamState.zeros_like(p)
    for _ in range(3):
        state, p = adam_step(state, p, {k: v.copy() for k, v in p.tensors.items()}, cfg)
    worst = 0.0
    for k, th in start.items():
        m = v = 0.0
        for t in (1, 2, 3):
            m = cfg.beta1 * m + (1 - cfg.beta1) * th
            v = cfg.beta2 * v + (1 - cfg.beta2) * th * th
            th -= cfg.eta * (m / (1 - cfg.beta1**t)) / (math.sqrt(v / (1 - cfg.beta2**t)) + cfg.eps_adam)
        worst = max(worst, abs(p[k].item() - th))
    return worst <= 1e-12, f"3-step hand recursion, max deviation {worst:.1e}"


SUITES = {
    "dot-tests": suite_dot_tests,
    "convexity": suite_convexity,
    "gradient-checks": suite_gradients,
    "cg-vs-svd": suite_cg_svd,
    "adam-recursion": suite_adam,
}


def run_selftest(fault=None, out=print) -> bool:
    ok_all = True
    out(f"{'suite':<18}{'result':<8}{'time':>8}  detail")
    for name, fn in SUITES.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn(fault) if name == "dot-tests" else fn()
        except Exception as exc:  # a crashing suite counts as a failure
            ok, detail = False, f"error: {exc!r}"
        ok_all &= ok
        out(f"{name:<18}{'PASS' if ok else 'FAIL':<8}{time.perf_counter() - t0:>7.1f}s  {detail}")
    return ok_all
