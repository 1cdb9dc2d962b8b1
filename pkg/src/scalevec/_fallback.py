"""Pure numpy implementations of the hot kernels.

Selected automatically when the compiled ``scalevec._ext`` module is not
available (or when ``SCALEVEC_PURE_PYTHON=1``). Every function here has a
twin with the same signature in ``_ext.pyx``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from scalevec._coords import interp_matrix

NAME = "numpy"


def im2col(x, k, pad):
    """Unfold ``(N, C, H, W)`` into ``(C*k*k, N*Ho*Wo)`` patch columns."""
    n, c, h, w = x.shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # N, C, Ho, Wo, k, k
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)


def col2im(cols, n, c, h, w, k, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the image grid."""
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + ho, j:j + wo] += cols[:, i, j].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out[:, :, pad:pad + h, pad:pad + w])


def resize(x, out_h, out_w):
    """Bilinear resize of a ``(B, H, W)`` stack."""
    _, h, w = x.shape
    ah = interp_matrix(h, out_h, x.dtype)
    aw = interp_matrix(w, out_w, x.dtype)
    return np.ascontiguousarray(np.matmul(np.matmul(ah, x), aw.T))


def resize_backward(g, h, w):
    """Adjoint of :func:`resize` for an output gradient ``(B, out_h, out_w)``."""
    _, out_h, out_w = g.shape
    ah = interp_matrix(h, out_h, g.dtype)
    aw = interp_matrix(w, out_w, g.dtype)
    return np.ascontiguousarray(np.matmul(np.matmul(ah.T, g), aw))


def pool2x2(x):
    """2x2/stride-2 max over ``(B, H, W)``; odd edges padded with -inf.

    Returns the maxima and their flat indices into the ``H*W`` plane.
    Ties go to the first element in row-major window order.
    """
    b, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    if h % 2 or w % 2:
        xp = np.full((b, 2 * ho, 2 * wo), -np.inf, dtype=x.dtype)
        xp[:, :h, :w] = x
    else:
        xp = x
    win = xp.reshape(b, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(b, ho, wo, 4)
    sel = np.argmax(win, axis=-1)
    vals = np.take_along_axis(win, sel[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(ho)[:, None] + sel // 2
    cols = 2 * np.arange(wo)[None, :] + sel % 2
    return np.ascontiguousarray(vals), (rows * w + cols).astype(np.int64)


def unpool2x2(g, idx, h, w):
    """Route ``(B, Ho, Wo)`` gradients to the recorded argmax positions."""
    b = g.shape[0]
    out = np.zeros((b, h * w), dtype=g.dtype)
    np.put_along_axis(out, idx.reshape(b, -1), g.reshape(b, -1), axis=1)
    return out.reshape(b, h, w)


def scale_argmax(stack):
    """Max and first argmax over axis 0 of an ``(S, M)`` stack."""
    idx = np.argmax(stack, axis=0)
    vals = np.take_along_axis(stack, idx[None], axis=0)[0]
    return np.ascontiguousarray(vals), idx.astype(np.int64)
