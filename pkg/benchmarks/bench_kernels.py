"""Compiled vs NumPy hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints the median wall time of each kernel under both backends and the
speed-up.  Outputs of the two backends are checked for agreement first.
"""

import argparse
import statistics
import time

import numpy as np

from acrsc import _kernels_py as py
from acrsc.numerics import RngStream
from acrsc.operators import RadonGeometry

try:
    from acrsc import _ckernels as cy
except ImportError:  # extension not built
    cy = None


def _median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases():
    rng = RngStream(0)
    g = RadonGeometry(32, 45, 64)
    rargs = (np.cos(g.angles), np.sin(g.angles), g.bin_centers, g.ray_steps, g.step)
    imgs = rng.normal((16, 32, 32))
    sinos = rng.normal((16, 45, 64))
    feats = rng.normal((64, 28, 28, 8))
    pre = rng.normal((64, 28, 28, 8))
    return {
        "radon_forward 16x32^2, 45 angles": lambda m: m.radon_forward(imgs, *rargs),
        "radon_adjoint 16x45x64": lambda m: m.radon_adjoint(sinos, 32, *rargs),
        "softplus_all 64x28x28x8": lambda m: m.softplus_all(pre, 5.0),
        "im2col 64x28x28x8, k=3": lambda m: m.im2col(feats, 3),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if cy is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return
    print(f"{'kernel':<36}{'numpy [ms]':>12}{'cython [ms]':>13}{'speed-up':>10}")
    for name, fn in cases().items():
        a, b = fn(py), fn(cy)
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)
        t_py = _median_time(lambda: fn(py), args.repeat)
        t_cy = _median_time(lambda: fn(cy), args.repeat)
        print(f"{name:<36}{1e3 * t_py:>12.2f}{1e3 * t_cy:>13.2f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
