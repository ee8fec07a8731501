# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: fused softplus derivatives and the ray-driven
Radon projector with its exact transpose.

Loop order is fixed (angle, bin, step, corner) so results are
deterministic.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, floor, fabs

cnp.import_array()


def softplus_all(a, double beta):
    """Return softplus_beta(a), its first and its second derivative."""
    cdef cnp.ndarray[double, ndim=1] flat = np.ascontiguousarray(a, dtype=np.float64).ravel()
    cdef Py_ssize_t n = flat.shape[0], i
    cdef cnp.ndarray[double, ndim=1] z = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] s = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] s2 = np.empty(n)
    cdef double t, e, sig
    with nogil:
        for i in range(n):
            t = beta * flat[i]
            e = exp(-fabs(t))
            if t >= 0:
                z[i] = (t + log1p(e)) / beta
                sig = 1.0 / (1.0 + e)
            else:
                z[i] = log1p(e) / beta
                sig = e / (1.0 + e)
            s[i] = sig
            s2[i] = beta * sig * (1.0 - sig)
    shape = np.shape(a)
    return z.reshape(shape), s.reshape(shape), s2.reshape(shape)


def radon_forward(imgs, double[::1] cos_t, double[::1] sin_t, double[::1] t_bins,
                  double[::1] s_steps, double ds):
    """Ray-driven projection of a stack of square images, shape (m, n, n)."""
    cdef double[:, :, ::1] im = np.ascontiguousarray(imgs, dtype=np.float64)
    cdef Py_ssize_t m = im.shape[0], n = im.shape[1]
    cdef Py_ssize_t na = cos_t.shape[0], nb = t_bins.shape[0], ns = s_steps.shape[0]
    out_arr = np.zeros((m, na, nb))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t k, a, b, q, i0, j0
    cdef double c = (n - 1) / 2.0, acc, px, py, row, col, fr, fc
    with nogil:
        for k in range(m):
            for a in range(na):
                for b in range(nb):
                    acc = 0.0
                    for q in range(ns):
                        px = t_bins[b] * cos_t[a] - s_steps[q] * sin_t[a]
                        py = t_bins[b] * sin_t[a] + s_steps[q] * cos_t[a]
                        col = px + c
                        row = c - py
                        i0 = <Py_ssize_t> floor(row)
                        j0 = <Py_ssize_t> floor(col)
                        if i0 < -1 or i0 >= n or j0 < -1 or j0 >= n:
                            continue
                        fr = row - i0
                        fc = col - j0
                        if i0 >= 0 and j0 >= 0:
                            acc = acc + (1 - fr) * (1 - fc) * im[k, i0, j0]
                        if i0 >= 0 and j0 + 1 < n:
                            acc = acc + (1 - fr) * fc * im[k, i0, j0 + 1]
                        if i0 + 1 < n and j0 >= 0:
                            acc = acc + fr * (1 - fc) * im[k, i0 + 1, j0]
                        if i0 + 1 < n and j0 + 1 < n:
                            acc = acc + fr * fc * im[k, i0 + 1, j0 + 1]
                    out[k, a, b] = ds * acc
    return out_arr


def radon_adjoint(sinos, Py_ssize_t n, double[::1] cos_t, double[::1] sin_t,
                  double[::1] t_bins, double[::1] s_steps, double ds):
    """Exact transpose of :func:`radon_forward`, shape (m, A, B) -> (m, n, n)."""
    cdef double[:, :, ::1] sg = np.ascontiguousarray(sinos, dtype=np.float64)
    cdef Py_ssize_t m = sg.shape[0]
    cdef Py_ssize_t na = cos_t.shape[0], nb = t_bins.shape[0], ns = s_steps.shape[0]
    out_arr = np.zeros((m, n, n))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t k, a, b, q, i0, j0
    cdef double c = (n - 1) / 2.0, v, px, py, row, col, fr, fc
    with nogil:
        for k in range(m):
            for a in range(na):
                for b in range(nb):
                    v = ds * sg[k, a, b]
                    for q in range(ns):
                        px = t_bins[b] * cos_t[a] - s_steps[q] * sin_t[a]
                        py = t_bins[b] * sin_t[a] + s_steps[q] * cos_t[a]
                        col = px + c
                        row = c - py
                        i0 = <Py_ssize_t> floor(row)
                        j0 = <Py_ssize_t> floor(col)
                        if i0 < -1 or i0 >= n or j0 < -1 or j0 >= n:
                            continue
                        fr = row - i0
                        fc = col - j0
                        if i0 >= 0 and j0 >= 0:
                            out[k, i0, j0] += (1 - fr) * (1 - fc) * v
                        if i0 >= 0 and j0 + 1 < n:
                            out[k, i0, j0 + 1] += (1 - fr) * fc * v
                        if i0 + 1 < n and j0 >= 0:
                            out[k, i0 + 1, j0] += fr * (1 - fc) * v
                        if i0 + 1 < n and j0 + 1 < n:
                            out[k, i0 + 1, j0 + 1] += fr * fc * v
    return out_arr


def im2col(x, Py_ssize_t k):
    """Zero-padded ``k x k`` patches of a channel-last stack ``(N, H, W, C)``.

    Returns ``(N*H*W, C*k*k)`` with columns ordered (channel, row, col).
    """
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], h = xv.shape[1], w = xv.shape[2], nc = xv.shape[3]
    cdef Py_ssize_t p = k // 2
    out_arr = np.empty((n * h * w, nc * k * k))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, di, dj, ch, ii, jj, r, col
    with nogil:
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    r = (b * h + i) * w + j
                    col = 0
                    for ch in range(nc):
                        for di in range(k):
                            ii = i + di - p
                            for dj in range(k):
                                jj = j + dj - p
                                if ii < 0 or ii >= h or jj < 0 or jj >= w:
                                    out[r, col] = 0.0
                                else:
                                    out[r, col] = xv[b, ii, jj, ch]
                                col = col + 1
    return out_arr
