"""Image and table artifacts: 8-bit binary PGM and metrics CSV files.

PGM quantization is linear: ``v = round(255 * clip(x, 0, 1))``.  Float
tensors are stored next to each PGM as ``.npy`` so metrics never see the
quantized values.
"""

from __future__ import annotations

import csv
import math
import re
from pathlib import Path

import numpy as np

from .numerics import MetricsRecord

__all__ = ["write_pgm", "read_pgm", "write_image_set", "read_image_set", "write_metrics_csv"]


def write_pgm(path, image) -> Path:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(q.tobytes())
    return path


_PGM_HEAD = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 file back into [0, 1] floats."""
    raw = Path(path).read_bytes()
    m = _PGM_HEAD.match(raw)
    if not m:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end())
    return data.reshape(h, w).astype(np.float64) / 255.0


def write_image_set(directory, images, prefix="img") -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        stem = d / f"{prefix}_{i:04d}"
        np.save(stem.with_suffix(".npy"), np.asarray(img, dtype=np.float64))
        paths.append(write_pgm(stem.with_suffix(".pgm"), img))
    return paths


def read_image_set(directory) -> dict[str, np.ndarray]:
    """Images keyed by file stem; ``.npy`` wins over ``.pgm`` for one stem."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    out = {}
    for p in sorted(d.iterdir()):
        if p.suffix == ".pgm" and p.stem not in out:
            out[p.stem] = read_pgm(p)
        elif p.suffix == ".npy":
            out[p.stem] = np.load(p)
    return out


def _fmt(v):
    return "inf" if v == math.inf else repr(float(v))


def write_metrics_csv(path, names, record: MetricsRecord) -> Path:
    """Per-image rows followed by ``mean`` and ``std`` rows (finite PSNRs only)."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("image", "psnr_db", "ssim"))
        for name, p, s in zip(names, record.psnr_db, record.ssim):
            w.writerow((name, _fmt(p), _fmt(s)))
        w.writerow(("mean", _fmt(record.psnr_mean), _fmt(record.ssim_mean)))
        w.writerow(("std", _fmt(record.psnr_std), _fmt(record.ssim_std)))
    return path
