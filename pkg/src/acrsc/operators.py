"""Linear forward operators with exact adjoints, pseudo-inverse application
through CG, and filtered back-projection for the toy parallel-beam geometry.

Every operator accepts either one array of ``domain_shape`` or a stack of
them with one leading batch axis; the same holds for ``adjoint`` and
``range_shape``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import CgResult, cg_least_squares, cg_solve

__all__ = [
    "ForwardOp",
    "IdentityOp",
    "ScaledIdentityOp",
    "BlurOp",
    "DenseOp",
    "RadonGeometry",
    "RadonOp",
    "pinv_adjoint_apply",
    "pinv_apply",
    "PinvFactors",
    "pinv_factors",
    "fbp",
    "make_operator",
    "dot_test",
]


def _split_batch(x: np.ndarray, shape: tuple[int, ...], what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == shape:
        return x[None], False
    if x.ndim == len(shape) + 1 and x.shape[1:] == shape:
        return x, True
    raise ValueError(f"{what} shape {x.shape} does not match {shape}")


class ForwardOp:
    """Base class: subclasses implement ``_apply`` / ``_adjoint`` on batches."""

    kind = "abstract"

    def __init__(self, domain_shape, range_shape):
        self.domain_shape = tuple(int(s) for s in domain_shape)
        self.range_shape = tuple(int(s) for s in range_shape)

    def apply(self, x: np.ndarray) -> np.ndarray:
        xb, batched = _split_batch(x, self.domain_shape, "domain")
        y = self._apply(xb)
        return y if batched else y[0]

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        yb, batched = _split_batch(y, self.range_shape, "range")
        x = self._adjoint(yb)
        return x if batched else x[0]

    __call__ = apply

    def to_config(self) -> dict:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.domain_shape} -> {self.range_shape})"


class IdentityOp(ForwardOp):
    kind = "identity"

    def __init__(self, shape):
        super().__init__(shape, shape)

    def _apply(self, x):
        return x.copy()

    def _adjoint(self, y):
        return y.copy()

    def to_config(self):
        return {"kind": self.kind}


class ScaledIdentityOp(ForwardOp):
    kind = "scaled_identity"

    def __init__(self, shape, c: float):
        if c == 0:
            raise ValueError("scale must be nonzero")
        super().__init__(shape, shape)
        self.c = float(c)

    def _apply(self, x):
        return self.c * x

    _adjoint = _apply

    def to_config(self):
        return {"kind": self.kind, "scale": self.c}


class BlurOp(ForwardOp):
    """Circular Gaussian blur on a 2-D grid.

    Periodic boundaries make the operator normal; it is invertible as long
    as the kernel spectrum has no zeros.
    """

    kind = "blur"

    def __init__(self, shape, sigma_b: float = 1.0, width: int = 5):
        if len(shape) != 2:
            raise ValueError("blur needs a 2-D domain")
        if width % 2 == 0 or width < 1:
            raise ValueError("blur width must be odd and positive")
        if sigma_b <= 0:
            raise ValueError("blur sigma must be positive")
        super().__init__(shape, shape)
        self.sigma_b = float(sigma_b)
        self.width = int(width)
        r = width // 2
        t = np.arange(-r, r + 1)
        g = np.exp(-(t**2) / (2 * sigma_b**2))
        k2 = np.outer(g, g)
        k2 /= k2.sum()
        kernel = np.zeros(shape)
        for i in range(-r, r + 1):
            for j in range(-r, r + 1):
                kernel[i % shape[0], j % shape[1]] += k2[i + r, j + r]
        self.kernel = kernel
        self._fk = np.fft.rfft2(kernel)

    def _apply(self, x):
        return np.fft.irfft2(np.fft.rfft2(x) * self._fk, s=self.domain_shape)

    def _adjoint(self, y):
        return np.fft.irfft2(np.fft.rfft2(y) * np.conj(self._fk), s=self.domain_shape)

    def to_config(self):
        return {"kind": self.kind, "blur_sigma": self.sigma_b, "blur_width": self.width}


class DenseOp(ForwardOp):
    """Explicit matrix acting on flattened inputs."""

    kind = "dense"

    def __init__(self, matrix, domain_shape=None, range_shape=None):
        m = np.array(matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("dense operator needs a 2-D matrix")
        domain_shape = (m.shape[1],) if domain_shape is None else tuple(domain_shape)
        range_shape = (m.shape[0],) if range_shape is None else tuple(range_shape)
        if math.prod(domain_shape) != m.shape[1] or math.prod(range_shape) != m.shape[0]:
            raise ValueError("matrix size does not match the declared shapes")
        super().__init__(domain_shape, range_shape)
        self.matrix = m

    def _apply(self, x):
        y = x.reshape(len(x), -1) @ self.matrix.T
        return y.reshape((len(x),) + self.range_shape)

    def _adjoint(self, y):
        x = y.reshape(len(y), -1) @ self.matrix
        return x.reshape((len(y),) + self.domain_shape)

    def to_config(self):
        return {"kind": self.kind, "matrix": self.matrix.tolist()}


@dataclass(frozen=True)
class RadonGeometry:
    """Parallel-beam geometry on a square image with unit pixel spacing.

    Angles are ``k * pi / num_angles``; detector bins are centred on the
    rotation axis.  Line integrals are sampled every ``step`` pixels along
    each ray over the image diagonal.
    """

    image_size: int = 32
    num_angles: int = 45
    num_bins: int = 64
    bin_spacing: float | None = None
    step: float = 1.0

    def __post_init__(self):
        if self.image_size < 2:
            raise ValueError("image_size must be >= 2")
        if self.num_angles < 1:
            raise ValueError("num_angles must be >= 1")
        if self.num_bins < 1:
            raise ValueError("num_bins must be >= 1")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.num_bins * self.spacing < self.diagonal - 1e-9:
            raise ValueError("detector does not cover the image diagonal")

    @property
    def diagonal(self) -> float:
        return self.image_size * math.sqrt(2.0)

    @property
    def spacing(self) -> float:
        if self.bin_spacing is not None:
            return float(self.bin_spacing)
        return max(1.0, self.diagonal / self.num_bins)

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.num_angles) * (np.pi / self.num_angles)

    @property
    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.num_bins) - (self.num_bins - 1) / 2.0) * self.spacing

    @property
    def ray_steps(self) -> np.ndarray:
        ns = int(math.ceil(self.diagonal / self.step)) + 1
        return (np.arange(ns) - (ns - 1) / 2.0) * self.step


class RadonOp(ForwardOp):
    """Ray-driven line integrals with bilinear interpolation.

    The adjoint is the exact transpose of the discrete forward map, so the
    dot-test holds to rounding.
    """

    kind = "radon"

    def __init__(self, geometry: RadonGeometry):
        n = geometry.image_size
        super().__init__((n, n), (geometry.num_angles, geometry.num_bins))
        self.geometry = geometry
        ang = geometry.angles
        self._cos = np.ascontiguousarray(np.cos(ang))
        self._sin = np.ascontiguousarray(np.sin(ang))
        self._t = np.ascontiguousarray(geometry.bin_centers)
        self._s = np.ascontiguousarray(geometry.ray_steps)

    def _apply(self, x):
        return kernels.radon_forward(x, self._cos, self._sin, self._t, self._s, self.geometry.step)

    def _adjoint(self, y):
        n = self.geometry.image_size
        return kernels.radon_adjoint(y, n, self._cos, self._sin, self._t, self._s, self.geometry.step)

    def to_config(self):
        g = self.geometry
        return {"kind": self.kind, "image_size": g.image_size, "num_angles": g.num_angles, "num_bins": g.num_bins}


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def ram_lak_response(num_bins: int, spacing: float) -> np.ndarray:
    """Frequency response of the band-limited ramp filter on the padded grid."""
    size = max(64, _next_pow2(2 * num_bins))
    k = np.concatenate([np.arange(0, size // 2 + 1), np.arange(-size // 2 + 1, 0)])
    h = np.zeros(size)
    h[0] = 1.0 / (4.0 * spacing**2)
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    return np.real(np.fft.fft(h))


def fbp(sinogram: np.ndarray, geometry: RadonGeometry, filter: str = "ram-lak") -> np.ndarray:
    """Filtered back-projection; linear in the sinogram.

    Each projection is zero-padded to a power of two, ramp-filtered in the
    Fourier domain and back-projected with the transpose of the forward
    projector.
    """
    if filter != "ram-lak":
        raise ValueError(f"unsupported filter {filter!r}")
    op = RadonOp(geometry)
    sb, batched = _split_batch(sinogram, op.range_shape, "sinogram")
    d = geometry.spacing
    resp = ram_lak_response(geometry.num_bins, d)
    size = len(resp)
    spec = np.fft.fft(sb, n=size, axis=-1) * resp
    q = d * np.real(np.fft.ifft(spec, axis=-1))[..., : geometry.num_bins]
    img = (np.pi / geometry.num_angles) * d * op._adjoint(q)
    return img if batched else img[0]


def pinv_adjoint_apply(A: ForwardOp, g: np.ndarray, tol: float = 1e-10, max_iter: int = 500) -> CgResult:
    """``w = (A*)^+ g`` for a single element ``g`` of the domain of ``A``."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != A.domain_shape:
        raise ValueError(f"g shape {g.shape} does not match domain {A.domain_shape}")
    return cg_least_squares(A.adjoint, A.apply, g, tol, max_iter)


@dataclass(frozen=True)
class PinvFactors:
    """Thin SVD ``A = U diag(s) V^T`` of a materialized operator (rank-truncated).

    Only ``V`` and ``s`` are kept: ``||(A*)^+ g|| = ||diag(1/s) V^T g||`` and
    ``A^+ A^{+*} g = V diag(1/s^2) V^T g`` need nothing else.
    """

    V: np.ndarray  # (domain size, rank)
    s: np.ndarray  # (rank,)


def pinv_factors(A: ForwardOp, rcond: float = 1e-10, max_size: int = 8192) -> PinvFactors:
    """Materialize ``A`` column by column and factor it; cached on the operator."""
    cached = getattr(A, "_pinv_factors", None)
    if cached is not None and cached[0] == rcond:
        return cached[1]
    n = math.prod(A.domain_shape)
    if n > max_size:
        raise ValueError(f"operator domain of size {n} is too large to materialize (limit {max_size})")
    cols = A.apply(np.eye(n).reshape((n,) + A.domain_shape)).reshape(n, -1)  # row j = A e_j
    _, s, Vt = np.linalg.svd(cols.T, full_matrices=False)
    keep = s > rcond * s[0]
    f = PinvFactors(np.ascontiguousarray(Vt[keep].T), s[keep])
    A._pinv_factors = (rcond, f)
    return f


def pinv_apply(A: ForwardOp, y: np.ndarray, tol: float = 1e-10, max_iter: int = 500) -> tuple[np.ndarray, bool]:
    """``A^+ y = A* (A A*)^+ y``, the transpose of :func:`pinv_adjoint_apply`."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != A.range_shape:
        raise ValueError(f"y shape {y.shape} does not match range {A.range_shape}")
    u, ok, _ = cg_solve(lambda v: A.apply(A.adjoint(v)), y, tol, max_iter)
    return A.adjoint(u), ok


def dot_test(A: ForwardOp, rng, trials: int = 1) -> float:
    """Largest relative adjoint mismatch ``|<Ax,y> - <x,A*y>| / (||Ax|| ||y||)``."""
    worst = 0.0
    for _ in range(trials):
        x = rng.normal(A.domain_shape)
        y = rng.normal(A.range_shape)
        ax = A.apply(x)
        lhs = float(np.vdot(ax, y))
        rhs = float(np.vdot(x, A.adjoint(y)))
        scale = float(np.linalg.norm(ax) * np.linalg.norm(y)) or 1.0
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


def make_operator(cfg: dict, image_shape=None) -> ForwardOp:
    """Build an operator from its JSON description."""
    kind = cfg.get("kind", "identity")
    size = cfg.get("image_size")
    shape = tuple(image_shape) if image_shape is not None else ((size, size) if size else None)
    if kind == "identity":
        return IdentityOp(shape)
    if kind == "scaled_identity":
        return ScaledIdentityOp(shape, cfg.get("scale", 1.0))
    if kind == "blur":
        return BlurOp(shape, cfg.get("blur_sigma", 1.0), cfg.get("blur_width", 5))
    if kind == "dense":
        return DenseOp(cfg["matrix"])
    if kind == "radon":
        geom = RadonGeometry(
            image_size=int(shape[0]) if shape else 32,
            num_angles=cfg.get("num_angles", 45),
            num_bins=cfg.get("num_bins", 64),
        )
        return RadonOp(geom)
    raise ValueError(f"unknown operator kind {kind!r}")
