"""Dataset ingestion (IDX files, bundled MNIST subset), ellipse phantoms and
construction of the ground-truth / undesirable sample sets."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import RngStream, gaussian_noise
from .operators import ForwardOp, RadonOp, fbp

__all__ = [
    "IdxError",
    "IdxMagicError",
    "IdxTypeError",
    "IdxTruncatedError",
    "load_idx",
    "write_idx",
    "default_data_dir",
    "mnist_images",
    "ellipse_phantoms",
    "DatasetPair",
    "build_distributions",
    "simulate_measurements",
]


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    """Not an unsigned-byte image file (wrong magic or wrong rank)."""


class IdxTypeError(IdxError):
    """Element type other than unsigned byte."""


class IdxTruncatedError(IdxError):
    """Payload shorter than the header promises."""


_IDX_TYPES = {0x08: "u1", 0x09: "i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def load_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX image file (magic ``0x00000803``).

    Returns a float64 array ``(count, rows, cols)`` scaled to [0, 1].
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise IdxMagicError(f"{path}: bad magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    if dtype_code not in _IDX_TYPES:
        raise IdxMagicError(f"{path}: unknown IDX element code 0x{dtype_code:02x}")
    if dtype_code != 0x08:
        raise IdxTypeError(f"{path}: element type 0x{dtype_code:02x} not supported (need unsigned byte)")
    if ndim != 3:
        raise IdxMagicError(
            f"{path}: magic 0x{int.from_bytes(raw[:4], 'big'):08x} has rank {ndim}; image files have rank 3"
        )
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise IdxTruncatedError(f"{path}: payload has {len(raw) - head} bytes, header promises {count}")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)
    return data.astype(np.float64) / 255.0


def write_idx(path, images) -> Path:
    """Write a uint8 image stack ``(count, rows, cols)`` as an IDX file."""
    arr = np.asarray(images)
    if arr.ndim != 3:
        raise ValueError("write_idx expects a (count, rows, cols) stack")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating):
            arr = np.clip(np.rint(arr * 255.0), 0, 255)
        arr = arr.astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, 0x08, 3))
        f.write(struct.pack(">3I", *arr.shape))
        f.write(np.ascontiguousarray(arr).tobytes())
    return path


MNIST_FILES = ("train-images-idx3-ubyte", "t10k-images-idx3-ubyte", "mnist5k-images-idx3-ubyte")


def default_data_dir() -> Path:
    env = os.environ.get("ACRSC_DATA_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "acrsc"


def export_mnist_subset(directory) -> Path:
    """Write the 5000-digit MNIST subset shipped with ``mlxtend`` as IDX."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise FileNotFoundError(
            "no MNIST IDX file found and mlxtend is not installed (pip install acrsc[mnist])"
        ) from exc
    X, _ = mnist_data()
    return write_idx(Path(directory) / "mnist5k-images-idx3-ubyte", X.reshape(-1, 28, 28).astype(np.uint8))


def mnist_images(data_dir=None) -> np.ndarray:
    """All available MNIST digits in [0, 1].

    Looks for standard IDX files in ``data_dir`` (default
    ``$ACRSC_DATA_DIR`` or ``~/.cache/acrsc``); if none exist, exports the
    bundled subset there first.
    """
    d = Path(data_dir) if data_dir is not None else default_data_dir()
    for name in MNIST_FILES:
        for cand in (d / name, d / (name.replace("-idx3", ".idx3"))):
            if cand.exists():
                return load_idx(cand)
    return load_idx(export_mnist_subset(d))


def ellipse_phantoms(count: int, size: int, rng: RngStream, supersample: int = 4) -> np.ndarray:
    """Random ellipse phantoms in [0, 1].

    Each phantom is a body ellipse (semi-axes 0.6-0.85 of the half-width,
    random rotation, intensity U(0.3, 0.5)) plus 3-6 inner ellipses whose
    centres lie within half the half-width of the middle (semi-axes
    0.08-0.3 of the half-width, intensity offset U(-0.25, 0.5)).  Values are
    clipped to [0, 1] and area-averaged over ``supersample^2`` subpixels.
    """
    half = size / 2.0
    t = (np.arange(size * supersample) + 0.5) / supersample - half
    X, Y = np.meshgrid(t, -t)
    out = np.empty((count, size, size))
    for k in range(count):
        img = np.zeros_like(X)
        ell = [(0.0, 0.0, *(rng.uniform((2,)) * 0.25 + 0.6) * half, rng.uniform() * np.pi, 0.3 + 0.2 * rng.uniform())]
        for _ in range(3 + int(rng.uniform() * 4)):
            r, ang = 0.5 * half * rng.uniform(), 2 * np.pi * rng.uniform()
            axes = (0.08 + 0.22 * rng.uniform((2,))) * half
            ell.append((r * np.cos(ang), r * np.sin(ang), axes[0], axes[1], rng.uniform() * np.pi, -0.25 + 0.75 * rng.uniform()))
        for cx, cy, a, b, phi, val in ell:
            c, s = np.cos(phi), np.sin(phi)
            u = (X - cx) * c + (Y - cy) * s
            v = -(X - cx) * s + (Y - cy) * c
            img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += val
        img = np.clip(img, 0.0, 1.0)
        out[k] = img.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return out


@dataclass
class DatasetPair:
    real_samples: np.ndarray  # (N, *shape), draws from P_r
    noisy_samples: np.ndarray  # (M, *shape), draws from P_n

    def __post_init__(self):
        if self.real_samples.shape[1:] != self.noisy_samples.shape[1:]:
            raise ValueError("real and noisy samples must share one shape")


def simulate_measurements(clean, A: ForwardOp, sigma: float, rng: RngStream) -> np.ndarray:
    """``y = A x + e`` for each image, ``e ~ N(0, sigma^2)`` i.i.d."""
    clean = np.asarray(clean, dtype=np.float64)
    y = A.apply(clean)
    return y + gaussian_noise(y.shape, sigma, rng)


def build_distributions(clean, A: ForwardOp, sigma: float, mode: str, rng: RngStream, clip: bool = False) -> DatasetPair:
    """Ground-truth set and an unpaired set of undesirable images.

    ``denoise``: noisy images ``x + e`` (optionally clipped to [0, 1]).
    ``ct``: FBP reconstructions of noisy sinograms.  The undesirable set is
    randomly permuted so no (clean, noisy) index pairs survive.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if len(clean) == 0:
        raise ValueError("empty dataset")
    if mode == "denoise":
        noisy = clean + gaussian_noise(clean.shape, sigma, rng)
        if clip:
            noisy = np.clip(noisy, 0.0, 1.0)
    elif mode == "ct":
        if not isinstance(A, RadonOp):
            raise ValueError("ct mode needs a Radon operator")
        noisy = fbp(simulate_measurements(clean, A, sigma, rng), A.geometry)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    perm = rng.permutation(len(clean))
    return DatasetPair(clean.copy(), noisy[perm])
