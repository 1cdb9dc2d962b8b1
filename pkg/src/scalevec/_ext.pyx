# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Same signatures and semantics as ``_fallback.py``."""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport INFINITY

from scalevec._coords import axis_taps

cnp.import_array()

NAME = "cython"


def im2col(const floating[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1
    cdef Py_ssize_t p = ho * wo
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((c * k * k, n * p), dtype=dtype)
    cdef floating[:, ::1] o = out
    cdef Py_ssize_t b, ci, i, j, oy, ox, iy, row, base, x0, x1
    with nogil:
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ci * k + i) * k + j
                    # valid output columns: 0 <= ox + j - pad < w
                    x0 = pad - j if pad > j else 0
                    x1 = w + pad - j if w + pad - j < wo else wo
                    for b in range(n):
                        base = b * p
                        for oy in range(ho):
                            iy = oy + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(x0, x1):
                                o[row, base + oy * wo + ox] = x[b, ci, iy, ox + j - pad]
    return out


def col2im(const floating[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, Py_ssize_t k, Py_ssize_t pad):
    cdef Py_ssize_t ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1
    cdef Py_ssize_t p = ho * wo
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t b, ci, i, j, oy, ox, iy, row, base, x0, x1
    with nogil:
        for b in range(n):
            base = b * p
            for ci in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ci * k + i) * k + j
                        x0 = pad - j if pad > j else 0
                        x1 = w + pad - j if w + pad - j < wo else wo
                        for oy in range(ho):
                            iy = oy + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(x0, x1):
                                o[b, ci, iy, ox + j - pad] += cols[row, base + oy * wo + ox]
    return out


def resize(const floating[:, :, ::1] x, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], w = x.shape[2]
    dtype = np.float32 if floating is float else np.float64
    lo_h, hi_h, f_h = axis_taps(h, out_h)
    lo_w, hi_w, f_w = axis_taps(w, out_w)
    cdef cnp.int64_t[::1] ylo = lo_h, yhi = hi_h, xlo = lo_w, xhi = hi_w
    cdef floating[::1] fy = f_h.astype(dtype), fx = f_w.astype(dtype)
    tmp_arr = np.empty((out_h, w), dtype=dtype)
    out = np.empty((nb, out_h, out_w), dtype=dtype)
    cdef floating[:, ::1] tmp = tmp_arr
    cdef floating[:, :, ::1] o = out
    cdef Py_ssize_t b, oy, ox, ix
    cdef floating a
    with nogil:
        for b in range(nb):
            for oy in range(out_h):
                a = fy[oy]
                for ix in range(w):
                    tmp[oy, ix] = (1 - a) * x[b, ylo[oy], ix] + a * x[b, yhi[oy], ix]
            for oy in range(out_h):
                for ox in range(out_w):
                    a = fx[ox]
                    o[b, oy, ox] = (1 - a) * tmp[oy, xlo[ox]] + a * tmp[oy, xhi[ox]]
    return out


def resize_backward(const floating[:, :, ::1] g, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t nb = g.shape[0], out_h = g.shape[1], out_w = g.shape[2]
    dtype = np.float32 if floating is float else np.float64
    lo_h, hi_h, f_h = axis_taps(h, out_h)
    lo_w, hi_w, f_w = axis_taps(w, out_w)
    cdef cnp.int64_t[::1] ylo = lo_h, yhi = hi_h, xlo = lo_w, xhi = hi_w
    cdef floating[::1] fy = f_h.astype(dtype), fx = f_w.astype(dtype)
    tmp_arr = np.empty((out_h, w), dtype=dtype)
    out = np.zeros((nb, h, w), dtype=dtype)
    cdef floating[:, ::1] tmp = tmp_arr
    cdef floating[:, :, ::1] o = out
    cdef Py_ssize_t b, oy, ox, ix
    cdef floating a, v
    with nogil:
        for b in range(nb):
            tmp[:, :] = 0
            for oy in range(out_h):
                for ox in range(out_w):
                    a = fx[ox]
                    v = g[b, oy, ox]
                    tmp[oy, xlo[ox]] += (1 - a) * v
                    tmp[oy, xhi[ox]] += a * v
            for oy in range(out_h):
                a = fy[oy]
                for ix in range(w):
                    o[b, ylo[oy], ix] += (1 - a) * tmp[oy, ix]
                    o[b, yhi[oy], ix] += a * tmp[oy, ix]
    return out


def pool2x2(const floating[:, :, ::1] x):
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t ho = (h + 1) // 2, wo = (w + 1) // 2
    dtype = np.float32 if floating is float else np.float64
    vals = np.empty((nb, ho, wo), dtype=dtype)
    idx = np.empty((nb, ho, wo), dtype=np.int64)
    cdef floating[:, :, ::1] v = vals
    cdef cnp.int64_t[:, :, ::1] ix = idx
    cdef Py_ssize_t b, oy, ox, dy, dx, yy, xx, best_i
    cdef floating best, cur
    with nogil:
        for b in range(nb):
            for oy in range(ho):
                for ox in range(wo):
                    best = -INFINITY
                    best_i = -1
                    for dy in range(2):
                        yy = 2 * oy + dy
                        if yy >= h:
                            break
                        for dx in range(2):
                            xx = 2 * ox + dx
                            if xx >= w:
                                break
                            cur = x[b, yy, xx]
                            if best_i < 0 or cur > best:
                                best = cur
                                best_i = yy * w + xx
                    v[b, oy, ox] = best
                    ix[b, oy, ox] = best_i
    return vals, idx


def unpool2x2(const floating[:, :, ::1] g, const cnp.int64_t[:, :, ::1] idx, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t nb = g.shape[0], ho = g.shape[1], wo = g.shape[2]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((nb, h * w), dtype=dtype)
    cdef floating[:, ::1] o = out
    cdef Py_ssize_t b, oy, ox
    with nogil:
        for b in range(nb):
            for oy in range(ho):
                for ox in range(wo):
                    o[b, idx[b, oy, ox]] = g[b, oy, ox]
    return out.reshape(nb, h, w)


def scale_argmax(const floating[:, ::1] stack):
    cdef Py_ssize_t s = stack.shape[0], m = stack.shape[1]
    dtype = np.float32 if floating is float else np.float64
    vals = np.empty(m, dtype=dtype)
    idx = np.zeros(m, dtype=np.int64)
    cdef floating[::1] v = vals
    cdef cnp.int64_t[::1] ix = idx
    cdef Py_ssize_t i, j
    with nogil:
        for j in range(m):
            v[j] = stack[0, j]
        for i in range(1, s):
            for j in range(m):
                if stack[i, j] > v[j]:
                    v[j] = stack[i, j]
                    ix[j] = i
    return vals, idx
