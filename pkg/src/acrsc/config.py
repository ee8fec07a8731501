"""Strict JSON experiment configuration.

Unknown keys and wrong types are collected into one :class:`ConfigError`
whose messages carry JSON-pointer paths (``/train/lambda_gp``).  Referenced
files are checked for existence during validation, before any compute.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .icnn import IcnnArchitecture
from .solvers import SolveConfig
from .training import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "DEFAULTS"]


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


DEFAULTS = {
    "data": {
        "mode": "denoise",
        "paths": {"images": None, "data_dir": None},
        "sigma": 0.2,
        "normalization": "unit",
        "clip": False,
        "train_count": 4900,
        "test_count": 100,
        "image_size": 32,
        "split_seed": 7,
    },
    "operator": {
        "kind": "identity",
        "geometry": {"num_angles": 45, "num_bins": 64},
        "blur_sigma": 1.0,
        "blur_width": 5,
        "scale": 1.0,
    },
    "model": {
        "architecture": {"kind": "conv", "num_layers": 4, "width": 8, "kernel_size": 3, "beta": 5.0, "activation": "softplus"},
        "seed": 0,
    },
    "train": {f.name: f.default for f in fields(TrainConfig)},
    "solve": {
        "lam": 5.0,
        "step_size": 0.01,
        "max_iters": 300,
        "inner_iters": 100,
        "outer_iters": 8,
        "init": "zero",
        "tau": 1.0,
        "delta": None,
        "divergence_factor": 10.0,
        "bregman": {"lam": 25.0},
    },
    "output": {"directory": "runs/default", "snapshot_stride": 0, "image_format": "pgm"},
    "rate_sweep": {
        "m": 400,
        "n": 600,
        "s_min": 1e-3,
        "s_max": 3.0,
        "deltas": [1e-3, 1.78e-3, 3.16e-3, 5.62e-3, 1e-2, 1.78e-2, 3.16e-2, 5.62e-2, 1e-1],
        "c": 1.0,
        "seed": 0,
        "solver": "tikhonov",
        "checkpoint": None,
    },
}
DEFAULTS["train"]["epochs"] = 10
DEFAULTS["train"]["lambda_gp"] = 10.0
DEFAULTS["train"]["lambda_sc"] = 2.0
DEFAULTS["train"]["eta"] = 5e-3

# keys whose value may be null / must be an existing file or directory
_NULLABLE = {"/data/paths/images", "/data/paths/data_dir", "/solve/delta", "/rate_sweep/checkpoint"}
_PATHS = {"/data/paths/images": "file", "/data/paths/data_dir": "dir", "/rate_sweep/checkpoint": "file"}
_CHOICES = {
    "/data/mode": ("denoise", "ct"),
    "/data/normalization": ("unit",),
    "/operator/kind": ("identity", "scaled_identity", "blur", "dense", "radon"),
    "/model/architecture/kind": ("conv", "dense"),
    "/model/architecture/activation": ("softplus", "linear"),
    "/solve/init": ("zero", "adjoint", "fbp", "given"),
    "/output/image_format": ("pgm",),
    "/rate_sweep/solver": ("tikhonov", "gd"),
    "/train/precision": ("float64",),
    "/train/pinv_solver": ("cg", "svd"),
}


def _kind(v):
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, (int, float)):
        return "number"
    if isinstance(v, str):
        return "string"
    if isinstance(v, list):
        return "list"
    if isinstance(v, dict):
        return "object"
    return "null"


def _merge(default, given, ptr, problems, base_dir):
    out = {}
    if not isinstance(given, dict):
        problems.append(f"{ptr or '/'}: expected an object")
        return copy.deepcopy(default)
    for key in given:
        if key not in default:
            problems.append(f"{ptr}/{key}: unknown key")
    for key, dval in default.items():
        p = f"{ptr}/{key}"
        if key not in given:
            out[key] = copy.deepcopy(dval)
            continue
        gval = given[key]
        if isinstance(dval, dict):
            out[key] = _merge(dval, gval, p, problems, base_dir)
            continue
        if gval is None and (p in _NULLABLE or dval is None):
            out[key] = None
            continue
        want = _kind(dval) if dval is not None else ("string" if p in _PATHS else _kind(gval))
        if _kind(gval) != want:
            problems.append(f"{p}: expected {want}, got {_kind(gval)}")
            out[key] = copy.deepcopy(dval)
            continue
        if want == "number" and isinstance(dval, int) and not isinstance(gval, int):
            if float(gval) != int(gval):
                problems.append(f"{p}: expected an integer")
            gval = int(gval)
        if p in _CHOICES and gval not in _CHOICES[p]:
            problems.append(f"{p}: {gval!r} not one of {list(_CHOICES[p])}")
        if p in _PATHS:
            path = Path(gval)
            if not path.is_absolute():
                path = base_dir / path
            ok = path.is_file() if _PATHS[p] == "file" else path.is_dir()
            if not ok:
                problems.append(f"{p}: path {str(path)!r} does not exist")
            gval = str(path)
        out[key] = gval
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    source: str | None = None

    def __getitem__(self, section):
        return self.raw[section]

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(**self.raw["train"])

    def solve(self, solver: str = "gd") -> SolveConfig:
        s = {k: v for k, v in self.raw["solve"].items() if k != "bregman"}
        if solver == "bregman":
            s.update(self.raw["solve"]["bregman"])
        s["snapshot_stride"] = self.raw["output"]["snapshot_stride"]
        return SolveConfig(**s)

    def architecture(self, input_shape) -> IcnnArchitecture:
        return IcnnArchitecture(input_shape=tuple(input_shape), **self.raw["model"]["architecture"])

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def _semantic_checks(cfg: dict, problems: list):
    t = cfg["train"]
    for key, cond, msg in (
        ("eta", t["eta"] > 0, "must be positive"),
        ("batch_size", t["batch_size"] >= 1, "must be >= 1"),
        ("beta1", 0 <= t["beta1"] < 1, "must lie in [0, 1)"),
        ("beta2", 0 <= t["beta2"] < 1, "must lie in [0, 1)"),
        ("lambda_gp", t["lambda_gp"] >= 0, "must be nonnegative"),
        ("lambda_sc", t["lambda_sc"] >= 0, "must be nonnegative"),
        ("epochs", t["epochs"] >= 0, "must be nonnegative"),
    ):
        if not cond:
            problems.append(f"/train/{key}: {msg}")
    s = cfg["solve"]
    for key in ("lam", "step_size"):
        if s[key] <= 0:
            problems.append(f"/solve/{key}: must be positive")
    for key in ("max_iters", "inner_iters", "outer_iters"):
        if s[key] < 1:
            problems.append(f"/solve/{key}: must be >= 1")
    if cfg["data"]["sigma"] < 0:
        problems.append("/data/sigma: must be nonnegative")
    for key in ("train_count", "test_count"):
        if cfg["data"][key] < 1:
            problems.append(f"/data/{key}: must be >= 1")
    if cfg["data"]["mode"] == "ct" and cfg["operator"]["kind"] != "radon":
        problems.append("/operator/kind: ct mode needs the radon operator")
    rs = cfg["rate_sweep"]
    if not rs["deltas"]:
        problems.append("/rate_sweep/deltas: empty delta grid")
    elif any(not isinstance(d, (int, float)) or isinstance(d, bool) or d < 0 for d in rs["deltas"]):
        problems.append("/rate_sweep/deltas: entries must be nonnegative numbers")
    if rs["m"] > rs["n"]:
        problems.append("/rate_sweep/m: must not exceed n (full row rank)")
    if rs["c"] <= 0:
        problems.append("/rate_sweep/c: must be positive")


def validate(doc, base_dir=".") -> ExperimentConfig:
    problems: list[str] = []
    cfg = _merge(DEFAULTS, doc, "", problems, Path(base_dir))
    if not problems:
        _semantic_checks(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(cfg)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read and validate a config file (``None`` gives the defaults).

    Relative paths inside the file resolve against the file's directory.
    """
    if path is None:
        doc, base = {}, Path.cwd()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"/: config file {str(path)!r} does not exist"])
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"/: not valid JSON ({exc})"]) from exc
        base = path.parent
    if overrides:
        doc = _deep_update(copy.deepcopy(doc), overrides)
    cfg = validate(doc, base)
    cfg.source = None if path is None else str(path)
    return cfg


def _deep_update(doc, upd):
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(doc.get(k), dict):
            _deep_update(doc[k], v)
        else:
            doc[k] = v
    return doc
