"""Differentiable tensor operations.

Every function takes and returns :class:`~scalevec.autograd.Tensor` objects
and records a backward closure on the active tape. Image-like tensors are
``(C, H, W)`` or batched ``(N, C, H, W)``.
"""
from __future__ import annotations

import numpy as np

from scalevec import kernels
from scalevec.autograd import Tensor, as_tensor, make, note_decision
from scalevec.errors import ConfigError, InputError

# Upper bound on im2col buffer size (elements) per batch chunk.
_COLS_BUDGET = 1 << 24


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _common(*arrays):
    dt = np.result_type(*[a.dtype for a in arrays])
    return [a if a.dtype == dt else a.astype(dt) for a in arrays]


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _common(a.data, b.data)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make("add", x + y, (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _common(a.data, b.data)

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make("sub", x - y, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _common(a.data, b.data)

    def back(g):
        ga = _unbroadcast(g * y, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * x, b.shape) if b.requires_grad else None
        return ga, gb

    return make("mul", x * y, (a, b), back)


def scale(a, c):
    """Multiply by a Python scalar."""
    a = as_tensor(a)
    c = a.dtype.type(c)
    return make("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    note_decision(mask)
    return make("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                lambda g: (g * mask,))


def magnitude(u, v):
    """Pointwise ``sqrt(u**2 + v**2)``; the subgradient at the origin is zero."""
    u, v = as_tensor(u), as_tensor(v)
    a, b = _common(u.data, v.data)
    r = np.sqrt(a * a + b * b)

    def back(g):
        safe = np.where(r > 0, r, 1)
        w = np.where(r > 0, g / safe, 0)
        return w * a, w * b

    return make("magnitude", r, (u, v), back)


# -- reductions and shape ------------------------------------------------------

def sum(a):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return make("sum", np.asarray(a.data.sum()), (a,),
                lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mean(a):
    a = as_tensor(a)
    n = a.size
    return make("mean", np.asarray(a.data.mean()), (a,),
                lambda g: (np.broadcast_to(g / n, a.shape).astype(a.dtype),))


def reshape(a, shape):
    a = as_tensor(a)
    return make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), check=False)


def flatten(a):
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    arrays = _common(*[t.data for t in tensors])
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return np.split(g, bounds, axis=axis)

    return make("concat", out, tensors, back, check=False)


# -- convolution, resizing, pooling --------------------------------------------

def _batched(x):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ConfigError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def conv2d(x, weights, bias=None, pad=0):
    """Same-stride 2D cross-correlation with zero padding.

    ``weights`` is ``(O, C, k, k)`` with odd ``k``; the output extent is
    ``H + 2*pad - k + 1``.
    """
    x, weights = as_tensor(x), as_tensor(weights)
    xb, squeeze = _batched(x)
    if weights.ndim != 4:
        raise ConfigError(f"weights must be (O,C,k,k), got {weights.shape}")
    o, c, k, k2 = weights.shape
    n, cx, h, w = xb.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"kernel must be square with odd size, got {k}x{k2}")
    if c != cx:
        raise ConfigError(f"input has {cx} channels, weights expect {c}")
    if pad < 0:
        raise ConfigError("padding must be non-negative")
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"kernel {k} with pad {pad} does not fit a {h}x{w} input")
    inputs = [x, weights]
    arrays = [xb, weights.data]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ConfigError(f"bias must have shape ({o},), got {bias.shape}")
        inputs.append(bias)
        arrays.append(bias.data)
    arrays = _common(*arrays)
    xd, wd = np.ascontiguousarray(arrays[0]), arrays[1]
    wm = wd.reshape(o, c * k * k)
    p = ho * wo
    step = max(1, _COLS_BUDGET // max(1, c * k * k * p))
    out = np.empty((n, o, ho, wo), dtype=xd.dtype)
    for s in range(0, n, step):
        e = min(n, s + step)
        cols = kernels.im2col(xd[s:e], k, pad)
        out[s:e] = (wm @ cols).reshape(o, e - s, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out += arrays[2][None, :, None, None]

    def back(g):
        gx = np.empty_like(xd) if x.requires_grad else None
        gw = np.zeros((o, c * k * k), dtype=xd.dtype) if weights.requires_grad else None
        for s in range(0, n, step):
            e = min(n, s + step)
            gs = np.ascontiguousarray(g[s:e].transpose(1, 0, 2, 3)).reshape(o, (e - s) * p)
            if gw is not None:
                gw += gs @ kernels.im2col(xd[s:e], k, pad).T
            if gx is not None:
                gx[s:e] = kernels.col2im(wm.T @ gs, e - s, c, h, w, k, pad)
        res = [None if gx is None else (gx[0] if squeeze else gx),
               None if gw is None else gw.reshape(o, c, k, k)]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return res

    return make("conv2d", out[0] if squeeze else out, inputs, back)


def bilinear_resize(x, out_h, out_w):
    """Resize the last two axes with half-pixel-centre bilinear sampling."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"target size must be positive, got {out_h}x{out_w}")
    if x.ndim < 2:
        raise ConfigError("bilinear_resize needs at least two axes")
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return make("resize", x.data, (x,), lambda g: (g,), check=False)
    flat = np.ascontiguousarray(x.data.reshape(-1, h, w))
    out = kernels.resize(flat, out_h, out_w).reshape(*lead, out_h, out_w)

    def back(g):
        gf = np.ascontiguousarray(g.reshape(-1, out_h, out_w))
        return (kernels.resize_backward(gf, h, w).reshape(x.shape),)

    return make("resize", out, (x,), back)


def maxpool_indices(x: np.ndarray):
    """2x2 max-pool indices for an array with ``(..., H, W)`` layout."""
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    vals, idx = kernels.pool2x2(np.ascontiguousarray(x.reshape(-1, h, w)))
    ho, wo = vals.shape[-2:]
    return vals.reshape(*lead, ho, wo), idx.reshape(*lead, ho, wo)


def pool_gather(x, idx):
    """Pick ``x[..., idx]`` where ``idx`` holds flat plane indices from a 2x2 pool."""
    x = as_tensor(x)
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    ho, wo = idx.shape[-2:]
    flat = x.data.reshape(-1, h * w)
    fi = idx.reshape(-1, ho * wo)
    out = np.take_along_axis(flat, fi, axis=1).reshape(*lead, ho, wo)

    def back(g):
        gb = np.ascontiguousarray(g.reshape(-1, ho, wo))
        return (kernels.unpool2x2(gb, np.ascontiguousarray(fi.reshape(-1, ho, wo)), h, w).reshape(x.shape),)

    return make("pool_gather", out, (x,), back, check=False)


def maxpool2x2(x):
    """2x2 stride-2 max pooling. Returns ``(values, argmax)``.

    ``argmax`` holds flat indices into each input ``H*W`` plane; ties go
    to the smallest index. Odd extents behave as if padded with -inf.
    """
    x = as_tensor(x)
    _, idx = maxpool_indices(x.data)
    note_decision(idx)
    return pool_gather(x, idx), idx


def select_by_index(tensors, index):
    """Elementwise ``tensors[index[p]][p]`` over a list of equally shaped tensors.

    Gradient flows only into the selected tensor at each position.
    """
    tensors = [as_tensor(t) for t in tensors]
    arrays = _common(*[t.data for t in tensors])
    out = np.choose(index, arrays) if len(arrays) <= 32 else np.take_along_axis(np.stack(arrays), index[None], 0)[0]

    def back(g):
        return [np.where(index == i, g, 0).astype(g.dtype, copy=False) if t.requires_grad else None
                for i, t in enumerate(tensors)]

    return make("select", out, tensors, back, check=False)


def spatial_gather(x, idx):
    """``(N, C, H, W)`` -> ``(N, C)``, picking the flat plane position ``idx[n, c]``."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    out = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]

    def back(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=2)
        return (gx.reshape(n, c, h, w),)

    return make("spatial_gather", out, (x,), back, check=False)


# -- dense layers and losses ------------------------------------------------------

def linear(x, weight, bias=None):
    """Fully connected layer, ``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ConfigError(f"linear: input width {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    inputs = [x, weight]
    arrays = [x.data, weight.data]
    if bias is not None:
        bias = as_tensor(bias)
        inputs.append(bias)
        arrays.append(bias.data)
    arrays = _common(*arrays)
    xd, wd = arrays[0], arrays[1]
    out = xd @ wd.T
    if bias is not None:
        out = out + arrays[2]

    def back(g):
        res = [g @ wd if x.requires_grad else None,
               g.T @ xd if weight.requires_grad else None]
        if bias is not None:
            res.append(g.sum(axis=0))
        return res

    return make("linear", out, inputs, back)


def softmax_cross_entropy(logits, labels):
    """Batch-mean cross entropy of ``(N, K)`` logits against integer labels."""
    logits = as_tensor(logits)
    z = logits.data
    if z.ndim == 1:
        z = z[None]
    labels = np.atleast_1d(np.asarray(labels))
    n, k = z.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.dtype.kind not in "iu":
        if not np.all(labels == np.round(labels)):
            raise InputError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"label out of range [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    se = ez.sum(axis=1, keepdims=True)
    lse = np.log(se)
    rows = np.arange(n)
    loss = np.asarray((lse[:, 0] - shifted[rows, labels]).mean())

    def back(g):
        p = ez / se
        p[rows, labels] -= 1
        return ((g / n) * p).reshape(logits.shape).astype(logits.dtype, copy=False),

    return make("cross_entropy", loss, (logits,), back)


def mse(pred, target):
    """Mean squared error. ``target`` may be a Tensor or a plain array."""
    pred, target = as_tensor(pred), as_tensor(target)
    p, t = _common(pred.data, target.data)
    if p.shape != t.shape:
        raise ConfigError(f"mse shape mismatch: {p.shape} vs {t.shape}")
    d = p - t
    n = max(1, d.size)

    def back(g):
        gd = (2.0 * g / n) * d
        return gd, -gd

    return make("mse", np.asarray((d * d).mean() if d.size else 0.0, dtype=p.dtype), (pred, target), back)
