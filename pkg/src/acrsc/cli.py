"""Command line entry point: ``acrsc {selftest,train,reconstruct,rate-sweep,eval}``.

Exit codes: 0 success, 1 invalid input (config, missing or mismatched
files), 2 runtime failure (divergence, non-finite training), 3 selftest
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, icnn
from .artifacts import read_image_set, write_metrics_csv
from .config import ConfigError, load_config
from .icnn import CheckpointError
from .numerics import batch_metrics
from .operators import IdentityOp
from .pipeline import DataError, prepare, run_reconstruction, run_training
from .regularizers import IcnnRegularizer, QuadraticTestRegularizer
from .solvers import RateSweepCase, SolverDivergedError, fit_loglog_slope, quadratic_case, rate_sweep, write_rate_csv
from .training import NonFiniteGradientError

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3


class InputError(Exception):
    pass


def _config(args, **extra):
    over: dict = {}
    if getattr(args, "seed", None) is not None:
        over["model"] = {"seed": args.seed}
        over["train"] = {"seed": args.seed}
    for k, v in extra.items():
        over.setdefault(k, {}).update(v)
    return load_config(args.config, over)


def _out_dir(args, cfg) -> Path:
    return Path(args.out or cfg["output"]["directory"])


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest(fault=args.inject_fault) else EXIT_SELFTEST


def cmd_train(args) -> int:
    cfg = _config(args)
    exp = prepare(cfg)
    out = _out_dir(args, cfg)
    every = max(1, args.log_every)

    def progress(r):
        if r["step"] % every == 0:
            print(f"epoch {r['epoch']} step {r['step']}: loss {r['loss']:.4f} "
                  f"(wass {r['wass_term']:.4f}, gp {r['gp_term']:.4f}, sc {r['sc_term']:.4f})", flush=True)

    ck, rows = run_training(exp, out, progress)
    if rows:
        r = rows[-1]
        print(f"final: loss {r['loss']:.6f} wass {r['wass_term']:.6f} gp {r['gp_term']:.6f} sc {r['sc_term']:.6f}")
    print(f"checkpoint: {ck}")
    return EXIT_OK


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise InputError(f"checkpoint {path} does not exist")
    return icnn.load_params(path)


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    params = _load_checkpoint(args.checkpoint)
    exp = prepare(cfg)
    out = _out_dir(args, cfg)
    rep, m, m0 = run_reconstruction(exp, params, args.solver, out)
    print(f"naive: {m0.summary()}")
    print(f"{args.solver}: {m.summary()}")
    if args.solver == "bregman":
        print(f"selected outer iterations: {np.bincount(np.atleast_1d(rep.outer_selected)).tolist()}")
    print(f"images and metrics written to {out}")
    return EXIT_OK


def cmd_rate_sweep(args) -> int:
    cfg = _config(args)
    rs = cfg["rate_sweep"]
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = args.checkpoint or rs["checkpoint"]
    if ckpt:
        # diagnostic: identity operator, x~ a test image, w~ = grad psi(x~)
        params = _load_checkpoint(ckpt)
        exp = prepare(cfg)
        reg = IcnnRegularizer(params)
        x_t = exp.test_images[0]
        case = RateSweepCase(IdentityOp(x_t.shape), reg.input_grad(x_t), x_t, rs["deltas"], rs["c"], rs["seed"] + 1)
        rows = rate_sweep(case, reg, "gd", cfg.solve("gd"), threads=args.threads)
        print("checkpoint mode: source condition holds trivially for A = I, results are diagnostic")
    else:
        case = quadratic_case(rs["m"], rs["n"], rs["seed"], rs["s_min"], rs["s_max"], rs["deltas"], rs["c"])
        reg = QuadraticTestRegularizer(case.A.domain_shape)
        rows = rate_sweep(case, reg, rs["solver"], cfg.solve("gd"), threads=args.threads)
    path = write_rate_csv(out / "rate_sweep.csv", rows)
    for r in rows:
        flag = "ok" if r["bregman_d"] <= r["bound"] else "ABOVE BOUND"
        print(f"delta {r['delta']:.3e}  lambda {r['lambda']:.3e}  D {r['bregman_d']:.3e}  bound {r['bound']:.3e}  {flag}")
    print(f"log-log slope: {fit_loglog_slope(rows):.3f}")
    print(f"table written to {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    recon, ref = read_image_set(args.recon), read_image_set(args.reference)
    only_recon = sorted(set(recon) - set(ref))
    only_ref = sorted(set(ref) - set(recon))
    if only_recon or only_ref or not recon:
        msg = ["image sets do not match"]
        if only_recon:
            msg.append(f"  only in {args.recon}: {', '.join(only_recon)}")
        if only_ref:
            msg.append(f"  only in {args.reference}: {', '.join(only_ref)}")
        if not recon and not ref:
            msg.append("  no images found")
        raise InputError("\n".join(msg))
    names = sorted(recon)
    for n in names:
        if recon[n].shape != ref[n].shape:
            raise InputError(f"{n}: shape {recon[n].shape} differs from reference {ref[n].shape}")
    try:
        m = batch_metrics([recon[n] for n in names], [ref[n] for n in names])
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    path = Path(args.out) if args.out else Path(args.recon) / "metrics.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(path, names, m)
    print(f"{len(names)} images: {m.summary()}")
    print(f"table written to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acrsc", description="Adversarial convex regularizers with a source condition.")
    p.add_argument("--version", action="version", version=f"acrsc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
        sp.add_argument("--out", help="output directory (overrides output.directory)")
        if seed:
            sp.add_argument("--seed", type=int, help="seed for initialisation and training")

    s = sub.add_parser("selftest", help="run the built-in oracle suites")
    s.add_argument("--inject-fault", choices=["adjoint"], help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selftest)

    s = sub.add_parser("train", help="train a convex regularizer")
    common(s)
    s.add_argument("--log-every", type=int, default=10, help="print progress every N steps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="solve the test problems with a trained regularizer")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--solver", choices=["gd", "bregman"], default="gd")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("rate-sweep", help="noise-level sweep of the Bregman distance")
    common(s)
    s.add_argument("--checkpoint", help="use a trained regularizer (diagnostic mode)")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_rate_sweep)

    s = sub.add_parser("eval", help="PSNR/SSIM of a reconstruction directory against references")
    s.add_argument("--recon", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--out", help="CSV path (default RECON/metrics.csv)")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverDivergedError, NonFiniteGradientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
