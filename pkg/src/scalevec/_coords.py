"""Sampling coordinates for half-pixel-centre bilinear resizing.

Shared by the compiled and the numpy kernels so both backends sample the
same source positions.
"""
import numpy as np


def axis_taps(n_in, n_out):
    """Return ``(lo, hi, frac)`` for resampling an axis of ``n_in`` onto ``n_out``.

    Output pixel ``i`` reads source coordinate ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped to ``[0, n_in - 1]``; its value is ``(1 - frac) * x[lo] + frac * x[hi]``.
    """
    i = np.arange(n_out, dtype=np.float64)
    src = (i + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Dense ``n_out x n_in`` matrix applying :func:`axis_taps` along one axis."""
    lo, hi, frac = axis_taps(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype, copy=False)
