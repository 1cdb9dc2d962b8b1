"""Reference oracles and property checks.

Nothing here calls the im2col/GEMM convolution path: the brute-force
oracles are written directly from the definitions so they can be trusted
to check the fast code.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from scalevec import ops
from scalevec.autograd import Tensor, Tape
from scalevec.errors import PreconditionError
from scalevec.layers import ScaleSpec, VectorField, pyramid_sizes


# -- brute-force oracles ---------------------------------------------------------

def brute_conv_oracle(x, weights, bias=None, pad=0):
    """Cross-correlation by explicit loops over (out channel, row, col, in channel), float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    c, h, wd = x.shape
    o, c2, k, _ = w.shape
    assert c == c2
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for yy in range(ho):
            for xx in range(wo):
                acc = 0.0 if bias is None else float(bias[oc])
                for ic in range(c):
                    acc += float(np.sum(xp[ic, yy:yy + k, xx:xx + k] * w[oc, ic]))
                out[oc, yy, xx] = acc
    return out


def brute_vec_conv_oracle(u, v, wu, wv, bias, pad):
    """Both Cartesian components convolved by :func:`brute_conv_oracle` and summed."""
    return brute_conv_oracle(u, wu, bias, pad) + brute_conv_oracle(v, wv, None, pad)


def brute_resize(plane, out_h, out_w):
    """Bilinear resize of one 2D plane evaluated pixel by pixel from the coordinate formula."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = (1 - fx) * plane[y0, x0] + fx * plane[y0, x1]
            bot = (1 - fx) * plane[y1, x0] + fx * plane[y1, x1]
            out[i, j] = (1 - fy) * top + fy * bot
    return out


def brute_maxpool(plane):
    """Exhaustive 2x2 window scan. Returns values and flat argmax indices."""
    plane = np.asarray(plane)
    h, w = plane.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    vals = np.empty((ho, wo), dtype=plane.dtype)
    idx = np.empty((ho, wo), dtype=np.int64)
    for oy in range(ho):
        for ox in range(wo):
            best, best_i = None, None
            for yy in range(2 * oy, min(2 * oy + 2, h)):
                for xx in range(2 * ox, min(2 * ox + 2, w)):
                    if best is None or plane[yy, xx] > best:
                        best, best_i = plane[yy, xx], yy * w + xx
            vals[oy, ox], idx[oy, ox] = best, best_i
    return vals, idx


def per_scale_oracle(branch_fn, x, spec: ScaleSpec):
    """Recompute every pyramid branch on its own and scan the stack in plain Python.

    ``branch_fn(k, resized_input)`` returns one branch's response before it is
    resized back. Returns ``(rho, argmax)`` with first-index tie-breaking.
    """
    h, w = x.shape[-2:]
    maps = []
    for k, (hk, wk) in zip(spec.exponents, pyramid_sizes(h, w, spec)):
        r = ops.relu(branch_fn(k, ops.bilinear_resize(x, hk, wk)))
        maps.append(ops.bilinear_resize(r, h, w).data)
    rho = maps[0].copy()
    arg = np.zeros(rho.shape, dtype=np.int64)
    for i, m in enumerate(maps[1:], start=1):
        better = m > rho
        rho[better] = m[better]
        arg[better] = i
    return rho, arg


# -- finite-difference gradient check ----------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_err: float
    n_checked: int
    n_flipped: int
    worst: Optional[tuple] = None

    def as_dict(self):
        return asdict(self)


def _same_decisions(a, b):
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(fn: Callable[[], Tensor], params, n_coords=100, step=1e-5, seed=0,
               floor=1e-8, max_tries=None) -> GradCheckResult:
    """Compare tape gradients with central differences on random coordinates.

    ``fn`` builds the scalar loss from ``params`` (it is called under a fresh
    tape each time). The step for coordinate ``x`` is ``step * max(1, |x|)``.
    Coordinates whose perturbation changes any recorded discrete decision
    (argmax, ReLU mask) are skipped and counted in ``n_flipped``; sampling
    continues until ``n_coords`` stable coordinates were checked.
    """
    with Tape() as tape:
        loss = fn()
    base = tape.decisions
    grads = tape.backward(loss, params)
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    max_tries = max_tries or total
    worst, max_err, checked, flipped = None, 0.0, 0, 0

    def evaluate():
        with Tape() as t:
            val = fn().item()
        return val, t.decisions

    for flat in order[:max_tries]:
        if checked >= n_coords:
            break
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, j = params[pi], int(flat - offsets[pi])
        orig = p.data
        x0 = float(orig.flat[j])
        h = step * max(1.0, abs(x0))
        vals = []
        stable = True
        for sgn in (1, -1):
            d = orig.copy()
            d.flat[j] = x0 + sgn * h
            p.data = d
            val, dec = evaluate()
            vals.append(val)
            stable = stable and _same_decisions(dec, base)
        p.data = orig
        if not stable:
            flipped += 1
            continue
        numeric = (vals[0] - vals[1]) / (2 * h)
        analytic = float(grads[p].flat[j])
        err = relative_error(analytic, numeric, floor)
        checked += 1
        if err >= max_err:
            max_err, worst = err, (pi, j, analytic, numeric)
    return GradCheckResult(max_err, checked, flipped, worst)


# -- scale group action -------------------------------------------------------------

@dataclass(frozen=True)
class ScaleTransform:
    """A rescaling by ``ratio`` (> 1 enlarges), optionally tagged with pyramid steps.

    ``steps`` is the same rescaling counted in powers of the pyramid factor;
    it sets the phase shift on the output side.
    """

    ratio: float
    steps: Optional[float] = None

    @classmethod
    def from_steps(cls, steps, spec: ScaleSpec):
        return cls(spec.factor ** steps, steps)

    def compose(self, other: "ScaleTransform") -> "ScaleTransform":
        steps = None if self.steps is None or other.steps is None else self.steps + other.steps
        return ScaleTransform(self.ratio * other.ratio, steps)

    def steps_for(self, spec: ScaleSpec) -> float:
        if self.steps is not None:
            return self.steps
        return math.log(self.ratio) / math.log(spec.factor)


def _centered_matrix(n, ratio):
    # Output pixel i reads source (i + 0.5 - n/2) / ratio + n/2 - 0.5; zero outside.
    m = np.zeros((n, n))
    for i in range(n):
        src = (i + 0.5 - n / 2) / ratio + n / 2 - 0.5
        lo = math.floor(src)
        f = src - lo
        if 0 <= lo < n:
            m[i, lo] += 1 - f
        if 0 <= lo + 1 < n and f > 0:
            m[i, lo + 1] += f
    return m


def _nearest_source(n, ratio):
    i = np.arange(n)
    src = np.floor((i + 0.5 - n / 2) / ratio + n / 2 - 0.5 + 0.5).astype(np.int64)
    return src, (src >= 0) & (src < n)


def apply_input_transform(x, t: ScaleTransform):
    """Rescale the last two axes about the image centre; canvas size kept, zero background."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if t.ratio == 1:
        out = arr.copy()
    else:
        h, w = arr.shape[-2:]
        mh = _centered_matrix(h, t.ratio).astype(arr.dtype)
        mw = _centered_matrix(w, t.ratio).astype(arr.dtype)
        out = np.matmul(np.matmul(mh, arr), mw.T)
    return Tensor(out) if isinstance(x, Tensor) else out


def phase_shift(y: VectorField, n_steps, spec: ScaleSpec) -> VectorField:
    """Rotate every vector by ``n_steps`` codec angle steps."""
    phi = math.radians(n_steps * spec.step)
    c, s = math.cos(phi), math.sin(phi)
    u, v = y.u.data, y.v.data
    return VectorField(Tensor(c * u - s * v), Tensor(s * u + c * v))


def apply_output_transform(y: VectorField, t: ScaleTransform, spec: ScaleSpec) -> VectorField:
    """Spatially rescale both planes, then rotate by the matching phase.

    Enlarging the input by ``factor**s`` moves a pattern's best response to
    a pyramid copy ``s`` positions smaller, so the phase moves by ``-s`` steps.
    """
    moved = VectorField(apply_input_transform(y.u, t), apply_input_transform(y.v, t))
    shift = -t.steps_for(spec)
    return moved if shift == 0 else phase_shift(moved, shift, spec)


@dataclass
class EquivarianceReport:
    fraction_argmax_shifted: Optional[float]
    magnitude_rel_err_median: float
    n_locations_tested: int
    steps: float = 0
    n_magnitude_locations: int = 0

    def as_dict(self):
        return asdict(self)


def _index_map(y: VectorField, spec: ScaleSpec):
    if y.index is not None:
        return y.index
    theta = np.mod(y.theta, 360.0)
    return np.clip(np.rint(theta / spec.step), 0, spec.n_scales - 1).astype(np.int64)


def _equivariance_samples(layer, x, steps, spec, border, threshold):
    """Per-location magnitude errors and index agreements for one input."""
    t = ScaleTransform.from_steps(steps, spec)
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = layer(x)
    yt = layer(apply_input_transform(x, t))
    vector = isinstance(y, VectorField)
    rho = y.rho if vector else y.data
    rho_t = yt.rho if vector else yt.data
    rho_ref = apply_input_transform(rho, t)
    h, w = rho_t.shape[-2:]
    inner = np.zeros((h, w), dtype=bool)
    inner[border:h - border, border:w - border] = True
    peak = rho_t.max()
    mask = (rho_t > threshold * peak) & inner if peak > 0 else np.zeros(rho_t.shape, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.abs(rho_t - rho_ref) / rho_ref
    rel = rel[mask & (rho_ref > 0)]
    if not vector:
        return rel, None

    idx = _index_map(y, spec)
    idx_t = _index_map(yt, spec)
    sy, vy = _nearest_source(h, t.ratio)
    sx, vx = _nearest_source(w, t.ratio)
    inside = vy[:, None] & vx[None, :]
    src_idx = idx[..., np.clip(sy, 0, h - 1)[:, None], np.clip(sx, 0, w - 1)[None, :]]
    expected = src_idx - int(round(steps))
    valid = mask & inside & (expected >= 0) & (expected < spec.n_scales)
    if steps != 0:
        valid &= (src_idx > 0) & (src_idx < spec.n_scales - 1)
    return rel, idx_t[valid] == expected[valid]


def _report(rels, agrees, steps):
    rel = np.concatenate(rels) if rels else np.zeros(0)
    med = float(np.median(rel)) if rel.size else float("nan")
    if agrees is None:
        return EquivarianceReport(None, med, int(rel.size), steps, int(rel.size))
    agree = np.concatenate(agrees) if agrees else np.zeros(0, dtype=bool)
    frac = float(np.mean(agree)) if agree.size else float("nan")
    return EquivarianceReport(frac, med, int(agree.size), steps, int(rel.size))


def check_equivariance(layer, x, steps, spec: ScaleSpec, border=None, threshold=0.1) -> EquivarianceReport:
    """Measure how closely ``layer`` commutes with rescaling by ``factor**steps``.

    Compares ``layer(T x)`` with ``T' layer(x)``: magnitudes against the
    bilinearly transported magnitude map, scale indices against the
    nearest-pixel transported index map shifted by ``-steps``. Only
    locations whose magnitude exceeds ``threshold`` times the maximum and
    that lie at least ``border`` pixels from the edge are scored; index
    agreement further skips source locations whose scale sits on a pyramid
    end, where the true optimum may have been clipped.
    ``layer`` may return a :class:`VectorField` or a plain magnitude Tensor.
    A list of inputs is scored input by input and pooled.
    """
    if abs(steps) > spec.n_up or abs(steps) > spec.n_down:
        raise PreconditionError(f"|steps|={abs(steps)} exceeds the unclipped range of the pyramid")
    if border is None:
        border = getattr(layer, "kernel", 0)
    inputs = x if isinstance(x, (list, tuple)) else [x]
    rels, agrees = [], []
    for xi in inputs:
        rel, agree = _equivariance_samples(layer, xi, steps, spec, border, threshold)
        rels.append(rel)
        if agree is not None:
            agrees.append(agree)
    return _report(rels, agrees if agrees else None, steps)


# -- check suites (used by the CLI and the acceptance tests) -------------------------

def oracle_suite(n_cases=200, seed=0, max_extent=9):
    """conv2d and vec_conv against the loop oracles on random small float64 problems."""
    from scalevec.layers import VectorFilterBank, vec_conv

    rng = np.random.default_rng(seed)
    worst = {"conv2d": 0.0, "vec_conv": 0.0}
    for _ in range(n_cases):
        h, w = rng.integers(1, max_extent + 1, size=2)
        c, o = rng.integers(1, 5, size=2)
        k = int(rng.choice([kk for kk in (1, 3, 5, 7, 9) if kk <= max_extent]))
        pad = int(rng.integers(0, k // 2 + 1))
        if h + 2 * pad < k or w + 2 * pad < k:
            pad = k // 2
        if h + 2 * pad < k or w + 2 * pad < k:
            k = 1
            pad = 0
        x = rng.standard_normal((c, h, w))
        wt = rng.standard_normal((o, c, k, k))
        b = rng.standard_normal(o)
        got = ops.conv2d(x, wt, b, pad).data
        ref = brute_conv_oracle(x, wt, b, pad)
        worst["conv2d"] = max(worst["conv2d"], float(np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-300)))
        u, v = rng.standard_normal((2, c, h, w))
        wu, wv = rng.standard_normal((2, o, c, k, k))
        got = vec_conv(VectorField(Tensor(u), Tensor(v)), VectorFilterBank(Tensor(wu), Tensor(wv), Tensor(b)), pad).data
        ref = brute_vec_conv_oracle(u, v, wu, wv, b, pad)
        worst["vec_conv"] = max(worst["vec_conv"], float(np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-300)))
    return {"n_cases": n_cases, "max_rel_err": max(worst.values()),
            "max_rel_err_conv2d": worst["conv2d"], "max_rel_err_vec_conv": worst["vec_conv"]}


def grad_suite(images, labels, scales, n_coords=500, seed=0, step=1e-5, model_cfg=None):
    """Finite differences through the full equivariant model and joint loss at float64."""
    from scalevec.models import ModelConfig, build_model, joint_loss

    cfg = model_cfg or ModelConfig("equivariant")
    model = build_model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    # move zero-initialised heads and biases off zero so every path carries gradient
    for name, p in model.params.items():
        if not np.any(p.data):
            p.data = rng.uniform(-0.1, 0.1, p.shape)
    x = np.asarray(images, dtype=np.float64)
    params = model.parameters()

    def loss():
        logits, sc = model(x)
        return joint_loss(logits, labels, sc, scales, 1.0)

    res = grad_check(loss, params, n_coords=n_coords, step=step, seed=seed)
    names = list(model.params)
    out = res.as_dict()
    if res.worst is not None:
        pi, j, a, nmr = res.worst
        out["worst"] = {"param": names[pi], "index": j, "analytic": a, "numeric": nmr}
    return out


def equivariance_suite(images, steps=(1, -1), seed=0, spec=None, kernel=7):
    """First equivariant layer with seeded random filters on a list of images."""
    from scalevec.layers import se_conv_scalar
    from scalevec.models import ModelConfig, build_model

    spec = spec or ScaleSpec()
    cfg = ModelConfig("equivariant", kernel=kernel, scale_spec=spec)
    model = build_model(cfg, seed=seed, dtype=np.float64)
    w, b = model["conv1.weight"], model["conv1.bias"]

    def layer(x):
        return se_conv_scalar(x, w, b, spec)

    layer.kernel = kernel
    xs = [np.asarray(im, dtype=np.float64)[None] for im in images]
    return {int(s): check_equivariance(layer, xs, s, spec).as_dict() for s in steps}
