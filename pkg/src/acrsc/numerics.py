"""Shared numerical primitives: seeded randomness, noise, CG on normal
equations, and image quality metrics.

Images and measurements are plain ``numpy.ndarray`` objects (float64 unless
a caller explicitly asks for float32).  Every function here is pure: inputs
are never modified in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.signal import correlate2d

__all__ = [
    "RngStream",
    "gaussian_noise",
    "CgResult",
    "cg_solve",
    "cg_least_squares",
    "psnr",
    "ssim",
    "MetricsRecord",
    "batch_metrics",
]


class RngStream:
    """Seeded random stream backed by the counter-based Philox generator.

    Normal deviates use Box-Muller on consecutive uniform pairs: uniforms
    ``(u[2i], u[2i+1])`` produce ``z[2i] = r cos(2 pi u[2i+1])`` and
    ``z[2i+1] = r sin(2 pi u[2i+1])`` with ``r = sqrt(-2 log(1 - u[2i]))``.
    An odd request discards the unused sine deviate.

    A stream has a single owner.  Parallel code derives independent streams
    with :meth:`spawn`.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))
        self.position = 0  # number of uniforms drawn so far

    def uniform(self, shape=()) -> np.ndarray | float:
        n = int(np.prod(shape, dtype=np.int64))
        self.position += n
        out = self._gen.random(shape)
        return float(out) if shape == () else out

    def normal(self, shape=()) -> np.ndarray | float:
        n = int(np.prod(shape, dtype=np.int64))
        npairs = (n + 1) // 2
        u = self._gen.random(2 * npairs)
        self.position += 2 * npairs
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        t = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * npairs)
        z[0::2] = r * np.cos(t)
        z[1::2] = r * np.sin(t)
        z = z[:n]
        return float(z[0]) if shape == () else z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by our own uniforms so the call sequence is explicit.
        perm = np.arange(n)
        u = self.uniform((max(n - 1, 0),))
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self, key: int) -> "RngStream":
        """Derive an independent stream; same (seed, key) gives the same stream."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return RngStream(int(ss.generate_state(1, dtype=np.uint64)[0]))


def gaussian_noise(shape, sigma: float, rng: RngStream) -> np.ndarray:
    """I.i.d. ``N(0, sigma^2)`` array of the given shape."""
    if not math.isfinite(sigma):
        raise ValueError("sigma must be finite")
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    shape = tuple(shape) if isinstance(shape, (tuple, list)) else (int(shape),)
    z = rng.normal(shape)
    return sigma * np.asarray(z, dtype=np.float64)


class CgResult(NamedTuple):
    w: np.ndarray
    residual: float
    converged: bool
    iterations: int


def cg_solve(
    apply_normal: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 500,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, bool, int]:
    """Conjugate gradients for a symmetric positive semidefinite operator.

    Stops once ``||b - M x|| <= tol * ||b||``.  On non-convergence the iterate
    with the smallest residual norm is returned with ``converged=False``.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    if bnorm == 0.0:
        return np.zeros_like(b), True, 0
    r = b - apply_normal(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = float(np.vdot(r, r))
    best_x, best_r = x.copy(), math.sqrt(rr)
    target = tol * bnorm
    if best_r <= target:
        return x, True, 0
    for it in range(1, max_iter + 1):
        Mp = apply_normal(p)
        pMp = float(np.vdot(p, Mp))
        if pMp <= 0.0:
            break
        alpha = rr / pMp
        x = x + alpha * p
        r = r - alpha * Mp
        rr_new = float(np.vdot(r, r))
        rn = math.sqrt(rr_new)
        if rn < best_r:
            best_x, best_r = x, rn
        if rn <= target:
            return x, True, it
        p = r + (rr_new / rr) * p
        rr = rr_new
    return best_x, False, max_iter


def cg_least_squares(
    adjoint_op: Callable[[np.ndarray], np.ndarray],
    forward_op: Callable[[np.ndarray], np.ndarray],
    g: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 500,
) -> CgResult:
    """Minimum-norm ``w`` minimizing ``||A* w - g||`` via CG on ``A A* w = A g``.

    ``forward_op`` maps X -> Y (A) and ``adjoint_op`` maps Y -> X (A*).
    Starting from zero keeps the iterates in range(A), which gives the
    minimum-norm solution.  ``residual`` is ``||A* w - g||``.
    """
    g = np.asarray(g, dtype=np.float64)
    rhs = forward_op(g)
    w, converged, iters = cg_solve(lambda u: forward_op(adjoint_op(u)), rhs, tol, max_iter)
    residual = float(np.linalg.norm(adjoint_op(w) - g))
    return CgResult(w, residual, converged, iters)


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB.  Identical inputs return ``math.inf``."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


_WINDOW = _gaussian_window(_SSIM_WIN, _SSIM_SIGMA)


def ssim(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity over all valid 11x11 window positions.

    Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, no border padding.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if x.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if min(x.shape) < _SSIM_WIN:
        raise ValueError(f"image {x.shape} smaller than the {_SSIM_WIN}x{_SSIM_WIN} window")
    c1 = (_SSIM_K1 * peak) ** 2
    c2 = (_SSIM_K2 * peak) ** 2

    def filt(a):
        return correlate2d(a, _WINDOW, mode="valid")

    mx, my = filt(x), filt(ref)
    sxx = filt(x * x) - mx * mx
    syy = filt(ref * ref) - my * my
    sxy = filt(x * ref) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsRecord:
    psnr_db: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    @property
    def psnr_mean(self) -> float:
        v = [p for p in self.psnr_db if math.isfinite(p)]
        return float(np.mean(v)) if v else math.inf

    @property
    def psnr_std(self) -> float:
        v = [p for p in self.psnr_db if math.isfinite(p)]
        return float(np.std(v)) if v else 0.0

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    @property
    def ssim_std(self) -> float:
        return float(np.std(self.ssim)) if self.ssim else float("nan")

    def summary(self) -> str:
        return (
            f"{self.psnr_mean:.2f} +- {self.psnr_std:.2f} dB, "
            f"SSIM {self.ssim_mean:.3f} +- {self.ssim_std:.3f}"
        )


def batch_metrics(xs: Sequence[np.ndarray], refs: Sequence[np.ndarray], peak: float = 1.0) -> MetricsRecord:
    if len(xs) != len(refs):
        raise ValueError("batch length mismatch")
    rec = MetricsRecord()
    for x, r in zip(xs, refs):
        rec.psnr_db.append(psnr(x, r, peak))
        rec.ssim.append(ssim(x, r, peak))
    return rec
