"""Kernel backend selection.

The compiled extension is preferred; the numpy twin is used when it cannot
be imported or when ``SCALEVEC_PURE_PYTHON`` is set to a non-empty value
other than ``0``.
"""
import importlib
import os

from scalevec import _fallback

BACKENDS = {"numpy": _fallback}

try:
    _ext = importlib.import_module("scalevec._ext")
except ImportError:  # pragma: no cover - depends on the build
    _ext = None
else:
    BACKENDS["cython"] = _ext


def _pick():
    if os.environ.get("SCALEVEC_PURE_PYTHON", "") not in ("", "0") or _ext is None:
        return _fallback
    return _ext


_impl = _pick()
BACKEND = _impl.NAME


def use(name):
    """Switch the active backend (``"cython"`` or ``"numpy"``) process-wide."""
    global _impl, BACKEND
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {sorted(BACKENDS)}")
    _impl = BACKENDS[name]
    BACKEND = name


def im2col(x, k, pad):
    return _impl.im2col(x, k, pad)


def col2im(cols, n, c, h, w, k, pad):
    return _impl.col2im(cols, n, c, h, w, k, pad)


def resize(x, out_h, out_w):
    return _impl.resize(x, out_h, out_w)


def resize_backward(g, h, w):
    return _impl.resize_backward(g, h, w)


def pool2x2(x):
    return _impl.pool2x2(x)


def unpool2x2(g, idx, h, w):
    return _impl.unpool2x2(g, idx, h, w)


def scale_argmax(stack):
    return _impl.scale_argmax(stack)
