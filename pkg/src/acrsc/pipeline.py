"""Config-driven experiment steps shared by the CLI and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import icnn
from .artifacts import write_image_set, write_metrics_csv
from .config import ExperimentConfig
from .data import build_distributions, ellipse_phantoms, load_idx, mnist_images, simulate_measurements
from .numerics import RngStream, batch_metrics
from .operators import ForwardOp, RadonOp, fbp, make_operator
from .regularizers import IcnnRegularizer
from .solvers import solve_bregman, solve_gd, write_trace_csv
from .training import train

__all__ = ["Experiment", "prepare", "run_training", "run_reconstruction", "DataError"]

# sub-stream keys of the split seed
_DIST_KEY, _TEST_NOISE_KEY = 5, 9


class DataError(ValueError):
    pass


@dataclass
class Experiment:
    cfg: ExperimentConfig
    A: ForwardOp
    train_images: np.ndarray
    test_images: np.ndarray

    @property
    def split_rng(self) -> RngStream:
        return RngStream(self.cfg["data"]["split_seed"])

    def distributions(self):
        d = self.cfg["data"]
        return build_distributions(self.train_images, self.A, d["sigma"], d["mode"], self.split_rng.spawn(_DIST_KEY), d["clip"])

    def measurements(self) -> np.ndarray:
        return simulate_measurements(self.test_images, self.A, self.cfg["data"]["sigma"], self.split_rng.spawn(_TEST_NOISE_KEY))

    def naive(self, y) -> np.ndarray:
        """Noisy images for denoising, FBP for tomography, ``A^T y`` otherwise."""
        if isinstance(self.A, RadonOp):
            return fbp(y, self.A.geometry)
        if y.shape[1:] == self.A.domain_shape:
            return y
        return self.A.adjoint(y)

    def noise_norm(self) -> float:
        return self.cfg["data"]["sigma"] * math.sqrt(math.prod(self.A.range_shape))


def _load_images(d: dict) -> np.ndarray:
    n = d["train_count"] + d["test_count"]
    if d["mode"] == "ct":
        return ellipse_phantoms(n, d["image_size"], RngStream(d["split_seed"]).spawn(1))
    if d["paths"]["images"]:
        return load_idx(d["paths"]["images"])
    return mnist_images(d["paths"]["data_dir"])


def prepare(cfg: ExperimentConfig) -> Experiment:
    """Load images, split train/test and build the forward operator.

    The split is a seeded permutation: training takes its head and testing
    its tail, so the two never overlap.
    """
    d = cfg["data"]
    imgs = _load_images(d)
    need = d["train_count"] + d["test_count"]
    if len(imgs) < need:
        raise DataError(f"/data: {len(imgs)} images available, train_count + test_count = {need}")
    perm = RngStream(d["split_seed"]).permutation(len(imgs))
    train_x = imgs[perm[: d["train_count"]]]
    test_x = imgs[perm[len(imgs) - d["test_count"] :]]
    op_cfg = {k: v for k, v in cfg["operator"].items() if k != "geometry"}
    op_cfg.update(cfg["operator"]["geometry"])
    A = make_operator(op_cfg, imgs.shape[1:])
    return Experiment(cfg, A, train_x, test_x)


def run_training(exp: Experiment, out_dir, progress=None):
    cfg = exp.cfg
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json() + "\n")
    arch = cfg.architecture(exp.A.domain_shape)
    init = icnn.init_params(arch, RngStream(cfg["model"]["seed"]))
    return train(cfg.train, exp.distributions(), exp.A, arch, out_dir, init=init, progress=progress)


def run_reconstruction(exp: Experiment, params: icnn.IcnnParams, solver: str, out_dir=None):
    """Solve every test problem; returns ``(report, metrics, naive metrics)``.

    With ``out_dir`` the reference, naive and reconstructed images, the
    metric tables and the solver trace are written there.
    """
    if params.arch.input_shape != exp.A.domain_shape:
        raise DataError(
            f"checkpoint input shape {params.arch.input_shape} does not match the operator domain {exp.A.domain_shape}"
        )
    reg = IcnnRegularizer(params)
    y = exp.measurements()
    scfg = exp.cfg.solve(solver)
    if solver == "bregman":
        if scfg.delta is None:
            scfg.delta = exp.noise_norm()
        rep = solve_bregman(exp.A, y, reg, scfg)
    else:
        rep = solve_gd(exp.A, y, reg, scfg)
    naive = exp.naive(y)
    m = batch_metrics(rep.x_final, exp.test_images)
    m0 = batch_metrics(naive, exp.test_images)
    if out_dir is not None:
        out = Path(out_dir)
        names = [p.stem for p in write_image_set(out / "reference", exp.test_images)]
        write_image_set(out / "noisy", naive)
        write_image_set(out / solver, rep.x_final)
        write_metrics_csv(out / f"metrics_{solver}.csv", names, m)
        write_metrics_csv(out / "metrics_noisy.csv", names, m0)
        write_trace_csv(out / f"trace_{solver}.csv", rep)
        (out / "config.json").write_text(exp.cfg.to_json() + "\n")
    return rep, m, m0
