"""Pure NumPy versions of the hot kernels.

Same numerics as the compiled ``_ckernels`` module; only the summation
order differs, so results agree to rounding.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


def softplus_all(a, beta):
    """Return softplus_beta(a), its first and its second derivative."""
    ba = beta * a
    z = np.logaddexp(0.0, ba) / beta
    s = expit(ba)
    s2 = beta * s * (1.0 - s)
    return z, s, s2


def _ray_table(n, cos_t, sin_t, t_bins, s_steps):
    # Bilinear gather table: flat pixel indices and weights, shape (A, B, S, 4).
    c = (n - 1) / 2.0
    px = t_bins[None, :, None] * cos_t[:, None, None] - s_steps[None, None, :] * sin_t[:, None, None]
    py = t_bins[None, :, None] * sin_t[:, None, None] + s_steps[None, None, :] * cos_t[:, None, None]
    col = px + c
    row = c - py
    i0 = np.floor(row)
    j0 = np.floor(col)
    fr = row - i0
    fc = col - j0
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)
    idx = np.zeros(i0.shape + (4,), dtype=np.int64)
    wts = np.zeros(i0.shape + (4,))
    corners = ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc))
    for k, (di, dj, w) in enumerate(corners):
        ii = i0 + di
        jj = j0 + dj
        ok = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n)
        idx[..., k] = np.where(ok, ii * n + jj, 0)
        wts[..., k] = np.where(ok, w, 0.0)
    return idx, wts


_TABLE_CACHE: dict = {}


def _table(n, cos_t, sin_t, t_bins, s_steps):
    key = (n, cos_t.tobytes(), sin_t.tobytes(), t_bins.tobytes(), s_steps.tobytes())
    tab = _TABLE_CACHE.get(key)
    if tab is None:
        if len(_TABLE_CACHE) > 8:
            _TABLE_CACHE.clear()
        tab = _TABLE_CACHE[key] = _ray_table(n, cos_t, sin_t, t_bins, s_steps)
    return tab


def radon_forward(imgs, cos_t, sin_t, t_bins, s_steps, ds):
    """Ray-driven projection of a stack of square images, shape (m, n, n)."""
    m, n, _ = imgs.shape
    idx, wts = _table(n, cos_t, sin_t, t_bins, s_steps)
    flat = imgs.reshape(m, n * n)
    vals = flat[:, idx] * wts  # (m, A, B, S, 4)
    return ds * vals.sum(axis=(-1, -2))


def radon_adjoint(sinos, n, cos_t, sin_t, t_bins, s_steps, ds):
    """Exact transpose of :func:`radon_forward`, shape (m, A, B) -> (m, n, n)."""
    m = sinos.shape[0]
    idx, wts = _table(n, cos_t, sin_t, t_bins, s_steps)
    out = np.empty((m, n * n))
    flat_idx = idx.ravel()
    for k in range(m):
        contrib = (ds * sinos[k])[:, :, None, None] * wts
        out[k] = np.bincount(flat_idx, weights=contrib.ravel(), minlength=n * n)
    return out.reshape(m, n, n)

# patches come from numpy's sliding-window view in icnn when this is None
def im2col(x, k):
    """Zero-padded ``k x k`` patches of ``(N, H, W, C)`` images as rows.

    Columns run over (channel, row, col) of the patch.
    """
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # N H W C k k
    n, h, w = x.shape[:3]
    return win.reshape(n * h * w, -1)
