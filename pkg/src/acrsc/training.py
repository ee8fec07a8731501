"""Adversarial training of the convex regularizer with gradient and
source-condition penalties, and a bias-corrected Adam optimizer."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import icnn
from .data import DatasetPair
from .icnn import IcnnArchitecture, IcnnParams
from .numerics import RngStream
from .operators import ForwardOp, pinv_adjoint_apply, pinv_apply, pinv_factors

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "AdamState",
    "NonFiniteGradientError",
    "adam_step",
    "sc_penalty",
    "loss_eq3",
    "train",
    "LOG_COLUMNS",
]


@dataclass
class TrainConfig:
    lambda_gp: float = 10.0
    lambda_sc: float = 2.0
    batch_size: int = 64
    epochs: int = 10
    eta: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    eps_adam: float = 1e-8
    seed: int = 0
    precision: str = "float64"
    sc_eps: float = 1e-8
    sc_squared: bool = False
    cg_tol: float = 1e-6
    cg_max_iter: int = 200
    pinv_solver: str = "cg"  # cg (matrix-free) | svd (materialized, small operators)
    record_wall_time: bool = False

    def __post_init__(self):
        if self.lambda_gp < 0 or self.lambda_sc < 0:
            raise ValueError("penalty weights must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.pinv_solver not in ("cg", "svd"):
            raise ValueError(f"unknown pinv_solver {self.pinv_solver!r}")
        if self.precision != "float64":
            raise ValueError("only float64 training is implemented")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: IcnnParams) -> "AdamState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
            0,
        )


class NonFiniteGradientError(FloatingPointError):
    pass


def adam_step(state: AdamState, params: IcnnParams, grads: dict, config: TrainConfig):
    """One bias-corrected Adam update followed by the feasibility projection."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient at step {state.t + 1} in tensors {bad}")
    if not state.m:
        state = AdamState.zeros_like(params)
    b1, b2 = config.beta1, config.beta2
    t = state.t + 1
    new_m, new_v, new_p = {}, {}, {}
    for k, p in params.tensors.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new_p[k] = p - config.eta * mhat / (np.sqrt(vhat) + config.eps_adam)
        new_m[k], new_v[k] = m, v
    return AdamState(new_m, new_v, t), icnn.project_feasible(IcnnParams(params.arch, new_p))


def _add(acc: dict | None, g: dict, scale: float = 1.0) -> dict:
    if acc is None:
        return {k: scale * v for k, v in g.items()}
    for k, v in g.items():
        acc[k] = acc[k] + scale * v
    return acc


def _zero_grads(params):
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def sc_penalty(params: IcnnParams, batch, A: ForwardOp, config: TrainConfig | None = None, want_grad: bool = True):
    """Mean of ``sqrt(||(A*)^+ grad_x psi(x_i)||^2 + eps^2)`` over a batch.

    Returns ``(value, param_grad, dropped)``.  Samples whose CG solve did not
    converge are left out of the mean; ``dropped`` counts them.  With
    ``sc_squared`` the unsmoothed squared norm is used instead.
    """
    cfg = config or TrainConfig()
    X = np.asarray(batch, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty batch")
    stats = {}

    def direction_svd(G):
        f = pinv_factors(A)
        Z = (G.reshape(len(G), -1) @ f.V) / f.s  # coordinates of w in the U basis
        sq = np.sum(Z * Z, axis=1)
        if cfg.sc_squared:
            ell, scale = sq, np.full(len(G), 2.0)
        else:
            ell = np.sqrt(sq + cfg.sc_eps**2)
            scale = 1.0 / ell
        stats["vals"], stats["keep"] = list(ell), np.ones(len(G), dtype=bool)
        V = ((Z * scale[:, None] / f.s) @ f.V.T).reshape(G.shape)
        return V / len(G)

    def direction(G):
        vals, V = [], np.zeros_like(G)
        keep = np.zeros(len(G), dtype=bool)
        for i, g in enumerate(G):
            res = pinv_adjoint_apply(A, g, cfg.cg_tol, cfg.cg_max_iter)
            if not res.converged:
                continue
            w = res.w
            if cfg.sc_squared:
                ell = float(np.sum(w * w))
                dl_dw = 2.0 * w
            else:
                ell = math.sqrt(float(np.sum(w * w)) + cfg.sc_eps**2)
                dl_dw = w / ell
            vals.append(ell)
            keep[i] = True
            if want_grad:
                # d ell / d theta = <A^+ (d ell / d w), d grad_x psi / d theta>
                V[i], _ = pinv_apply(A, dl_dw, cfg.cg_tol, cfg.cg_max_iter)
        stats["vals"], stats["keep"] = vals, keep
        return V / max(len(vals), 1)

    fn = direction_svd if cfg.pinv_solver == "svd" else direction
    if want_grad:
        _, _, grads = icnn.input_grads_and_vjp(params, X, fn)
    else:
        fn(icnn.psi_input_grads(params, X))
        grads = None
    vals, keep = stats["vals"], stats["keep"]
    dropped = int(len(X) - keep.sum())
    if dropped:
        log.warning("sc_penalty: %d of %d samples dropped (CG did not converge)", dropped, len(X))
    if not vals:
        return 0.0, (_zero_grads(params) if want_grad else None), dropped
    return float(np.mean(vals)), grads, dropped


def loss_eq3(params: IcnnParams, batch_r, batch_n, config: TrainConfig, A: ForwardOp, rng: RngStream):
    """Adversarial loss with gradient and source-condition penalties.

    ``mean psi(x_i) - mean psi(z_i) + lambda_gp * L_gp + lambda_sc * L_sc``.
    Interpolation weights ``eps_i ~ U[0, 1]`` are drawn from ``rng`` once per
    pair.  Returns ``(value, param_grad, components)``; the components
    ``psi_real - psi_noisy + gp_weighted + sc_weighted`` sum to ``value``.
    """
    Xr = np.asarray(batch_r, dtype=np.float64)
    Xn = np.asarray(batch_n, dtype=np.float64)
    if len(Xr) != len(Xn) or len(Xr) == 0:
        raise ValueError("batches must be nonempty and of equal length")
    n = len(Xr)
    eps = np.asarray(rng.uniform((n,)))

    weights = np.concatenate([np.full(n, 1.0 / n), np.full(n, -1.0 / n)])
    psi, _, grads = icnn.psi_value_and_grads(params, np.concatenate([Xr, Xn]), weights, want_input=False)
    psi_real, psi_noisy = float(np.mean(psi[:n])), float(np.mean(psi[n:]))

    bshape = (n,) + (1,) * (Xr.ndim - 1)
    Xi = eps.reshape(bshape) * Xr + (1.0 - eps.reshape(bshape)) * Xn
    gp = {}

    def gp_direction(G):
        norms = np.sqrt(np.sum(G.reshape(n, -1) ** 2, axis=1))
        gp["value"] = float(np.mean((norms - 1.0) ** 2))
        coef = config.lambda_gp * 2.0 * (norms - 1.0) / np.where(norms > 0, norms, 1.0) / n
        return coef.reshape(bshape) * G

    if config.lambda_gp > 0:
        _, _, g_gp = icnn.input_grads_and_vjp(params, Xi, gp_direction)
        grads = _add(grads, g_gp)
    else:
        gp_direction(icnn.psi_input_grads(params, Xi))
    l_gp = gp["value"]

    l_sc, g_sc, dropped = sc_penalty(params, Xr, A, config, want_grad=config.lambda_sc > 0)
    if config.lambda_sc > 0:
        grads = _add(grads, g_sc, config.lambda_sc)

    gp_w = config.lambda_gp * l_gp
    sc_w = config.lambda_sc * l_sc
    value = psi_real - psi_noisy + gp_w + sc_w
    components = {
        "psi_real": psi_real,
        "psi_noisy": psi_noisy,
        "wass_term": psi_real - psi_noisy,
        "gp": l_gp,
        "sc": l_sc,
        "gp_weighted": gp_w,
        "sc_weighted": sc_w,
        "cg_dropped": dropped,
    }
    return value, grads, components


LOG_COLUMNS = ("epoch", "step", "loss", "wass_term", "gp_term", "sc_term", "cg_dropped", "wall_ms")


def _write_log(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if isinstance(r[k], float) else r[k]) for k in LOG_COLUMNS})


def train(
    config: TrainConfig,
    dataset: DatasetPair,
    A: ForwardOp,
    arch: IcnnArchitecture,
    out_dir,
    init: IcnnParams | None = None,
    progress=None,
):
    """Train a regularizer and write checkpoints plus ``train_log.csv``.

    Every epoch visits seeded shuffles of both sample sets in full batches of
    ``batch_size`` (a trailing partial batch is skipped).  The CSV holds one
    row per step; ``gp_term`` and ``sc_term`` are the unweighted penalties.
    Returns ``(final checkpoint path, log rows)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = RngStream(config.seed)
    params = init.copy() if init is not None else icnn.init_params(arch, rng.spawn(1))
    eps_rng = rng.spawn(2)
    state = AdamState.zeros_like(params)
    Xr, Xn = dataset.real_samples, dataset.noisy_samples
    n_pairs = min(len(Xr), len(Xn))
    bs = min(config.batch_size, n_pairs)
    steps_per_epoch = n_pairs // bs
    rows: list[dict] = []
    meta = {"train_config": config.to_dict(), "operator": A.to_config() if A.kind != "dense" else {"kind": "dense"}}
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            pr = rng.permutation(len(Xr))
            pn = rng.permutation(len(Xn))
            for b in range(steps_per_epoch):
                t0 = time.perf_counter()
                ir = pr[b * bs : (b + 1) * bs]
                inn = pn[b * bs : (b + 1) * bs]
                value, grads, comp = loss_eq3(params, Xr[ir], Xn[inn], config, A, eps_rng)
                state, params = adam_step(state, params, grads, config)
                step += 1
                wall = (time.perf_counter() - t0) * 1000.0 if config.record_wall_time else 0.0
                rows.append(
                    {
                        "epoch": epoch,
                        "step": step,
                        "loss": value,
                        "wass_term": comp["wass_term"],
                        "gp_term": comp["gp"],
                        "sc_term": comp["sc"],
                        "cg_dropped": comp["cg_dropped"],
                        "wall_ms": round(wall, 3),
                    }
                )
                if progress is not None:
                    progress(rows[-1])
            icnn.save_params(params, out_dir / f"epoch_{epoch:03d}.acrsc", extra={**meta, "epoch": epoch})
            _write_log(out_dir / "train_log.csv", rows)
    except BaseException:
        icnn.save_params(params, out_dir / "partial.acrsc", extra={**meta, "partial": True, "step": step})
        _write_log(out_dir / "train_log.csv", rows)
        raise
    final = icnn.save_params(params, out_dir / "final.acrsc", extra={**meta, "epochs": config.epochs})
    _write_log(out_dir / "train_log.csv", rows)
    return final, rows
