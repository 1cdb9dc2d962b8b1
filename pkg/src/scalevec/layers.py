"""Scale-pyramid convolutions that output vector fields.

Each filter is applied to bilinear rescalings of its input. The responses
are resized back, ReLU'd and max-pooled across scales; the winning scale
index is encoded as the angle of a 2D vector whose length is the response.
Downstream layers convolve the two Cartesian planes of such fields.

Scale index ``i`` (0 = smallest copy) maps to the angle
``i * angle_range / (n_scales - 1)`` degrees.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from scalevec import kernels, ops
from scalevec.autograd import Tensor, as_tensor, note_decision
from scalevec.errors import ConfigError


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero."""
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass(frozen=True)
class ScaleSpec:
    """Pyramid geometry and angle codec.

    ``n_down`` copies are shrunk and ``n_up`` enlarged by successive powers
    of ``factor``; together with the identity copy they give ``n_scales``.
    """

    n_scales: int = 8
    factor: float = 1.25
    n_up: int = 3
    n_down: int = 4
    angle_range: float = 120.0

    def __post_init__(self):
        if self.n_scales < 2:
            raise ConfigError("need at least two scales to define an angle step")
        if self.n_up < 0 or self.n_down < 0 or self.n_up + self.n_down + 1 != self.n_scales:
            raise ConfigError(
                f"n_up ({self.n_up}) + n_down ({self.n_down}) + 1 must equal n_scales ({self.n_scales})")
        if not self.factor > 1:
            raise ConfigError(f"scale factor must exceed 1, got {self.factor}")
        if not 0 < self.angle_range <= 180:
            raise ConfigError(f"angle range must lie in (0, 180] degrees, got {self.angle_range}")

    @classmethod
    def from_scales(cls, n_scales=8, factor=1.25, angle_range=120.0):
        """Split ``n_scales`` with the extra copy going to the shrinking side."""
        n_down = n_scales // 2
        return cls(n_scales, factor, n_scales - 1 - n_down, n_down, angle_range)

    @property
    def step(self) -> float:
        """Angle increment between neighbouring scales, in degrees."""
        return self.angle_range / (self.n_scales - 1)

    @property
    def exponents(self):
        return range(-self.n_down, self.n_up + 1)

    def angles(self) -> np.ndarray:
        return np.array([angle_of_index(i, self) for i in range(self.n_scales)])

    def as_dict(self):
        return {"n_scales": self.n_scales, "factor": self.factor, "n_up": self.n_up,
                "n_down": self.n_down, "angle_range": self.angle_range}


def angle_of_index(i: int, spec: ScaleSpec) -> float:
    """Codec angle (degrees) of scale index ``i``."""
    if not 0 <= i < spec.n_scales:
        raise ConfigError(f"scale index {i} outside [0, {spec.n_scales})")
    return i * spec.angle_range / (spec.n_scales - 1)


def pyramid_sizes(h: int, w: int, spec: ScaleSpec):
    """``(height, width)`` of every pyramid copy, smallest first."""
    return [(max(1, round_half_away(h * spec.factor ** k)), max(1, round_half_away(w * spec.factor ** k)))
            for k in spec.exponents]


def build_pyramid(x, spec: ScaleSpec):
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise ConfigError("cannot build a pyramid of an empty image")
    return [ops.bilinear_resize(x, hk, wk) for hk, wk in pyramid_sizes(h, w, spec)]


@dataclass
class VectorField:
    """Per-pixel 2D vectors as Cartesian planes ``u`` and ``v``.

    ``index`` optionally keeps the integer scale map when the field comes
    from scale pooling, so angles can be read back without rounding.
    """

    u: Tensor
    v: Tensor
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise ConfigError(f"u and v planes differ in shape: {self.u.shape} vs {self.v.shape}")

    @property
    def shape(self):
        return self.u.shape

    @property
    def rho(self) -> np.ndarray:
        return np.hypot(self.u.data, self.v.data)

    @property
    def theta(self) -> np.ndarray:
        """Angle in degrees."""
        return np.degrees(np.arctan2(self.v.data, self.u.data))

    def stacked(self) -> Tensor:
        """Both planes concatenated on the channel axis (u first)."""
        return ops.concat([self.u, self.v], axis=-3)


@dataclass
class VectorFilterBank:
    wu: Tensor
    wv: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.wu.shape != self.wv.shape:
            raise ConfigError(f"wu {self.wu.shape} and wv {self.wv.shape} must match")
        if self.bias.shape != (self.wu.shape[0],):
            raise ConfigError(f"bias must have shape ({self.wu.shape[0]},)")

    @property
    def kernel(self):
        return self.wu.shape[-1]

    def stacked(self, phase_deg=0.0) -> Tensor:
        """``[wu', wv']`` on the input-channel axis, matched to inputs rotated by ``phase_deg``.

        Rotating every input vector by phi and convolving with ``(wu, wv)`` is
        the same as convolving the unrotated input with
        ``(cos*wu + sin*wv, -sin*wu + cos*wv)``.
        """
        if phase_deg == 0:
            return ops.concat([self.wu, self.wv], axis=1)
        c, s = math.cos(math.radians(phase_deg)), math.sin(math.radians(phase_deg))
        wu = ops.add(ops.scale(self.wu, c), ops.scale(self.wv, s))
        wv = ops.sub(ops.scale(self.wv, c), ops.scale(self.wu, s))
        return ops.concat([wu, wv], axis=1)


def scale_pool(branches):
    """Per-location max over aligned branch maps; ties go to the lowest index."""
    stack = np.stack([b.data for b in branches])
    shape = stack.shape[1:]
    _, index = kernels.scale_argmax(np.ascontiguousarray(stack.reshape(len(branches), -1)))
    index = index.reshape(shape)
    note_decision(index)
    return ops.select_by_index(branches, index), index


def encode(rho, index, spec: ScaleSpec) -> VectorField:
    """Turn magnitudes and scale indices into Cartesian vectors."""
    rad = np.radians(spec.angles()).astype(rho.dtype)
    u = ops.mul(rho, np.cos(rad)[index])
    v = ops.mul(rho, np.sin(rad)[index])
    return VectorField(u, v, index)


def _multiscale(x, spec, respond):
    h, w = x.shape[-2:]
    branches = []
    for k, (hk, wk) in zip(spec.exponents, pyramid_sizes(h, w, spec)):
        r = ops.relu(respond(k, ops.bilinear_resize(x, hk, wk)))
        branches.append(ops.bilinear_resize(r, h, w))
    return scale_pool(branches)


def se_conv_magnitude(x, weights, bias, spec: ScaleSpec):
    """Scale-pooled response of a scalar input: ``(rho, index)``."""
    x, weights = as_tensor(x), as_tensor(weights)
    pad = weights.shape[-1] // 2
    return _multiscale(x, spec, lambda k, xs: ops.conv2d(xs, weights, bias, pad))


def se_conv_scalar(x, weights, bias, spec: ScaleSpec) -> VectorField:
    """Apply shared filters over the pyramid of a scalar map; output a vector field."""
    rho, index = se_conv_magnitude(x, weights, bias, spec)
    return encode(rho, index, spec)


def vec_conv(y: VectorField, bank: VectorFilterBank, pad=None) -> Tensor:
    """``conv2d(u, wu) + conv2d(v, wv) + bias``."""
    if pad is None:
        pad = bank.kernel // 2
    return ops.conv2d(y.stacked(), bank.stacked(), bank.bias, pad)


def se_conv_vector(y: VectorField, bank: VectorFilterBank, spec: ScaleSpec,
                   shift_angles=True) -> VectorField:
    """Scale-pyramid vector-field convolution.

    With ``shift_angles`` the copy resized by ``factor**k`` has its vectors
    rotated by ``-k`` angle steps before filtering, which is what a genuine
    rescaling of the image by that factor would do to them.
    """
    pad = bank.kernel // 2

    def respond(k, planes):
        phase = -k * spec.step if shift_angles else 0.0
        return ops.conv2d(planes, bank.stacked(phase), bank.bias, pad)

    rho, index = _multiscale(y.stacked(), spec, respond)
    return encode(rho, index, spec)


def vec_maxpool2x2(y: VectorField) -> VectorField:
    """Keep, per 2x2 window, the vector of largest magnitude (first on ties)."""
    _, idx = ops.maxpool_indices(y.rho)
    note_decision(idx)
    index = None
    if y.index is not None:
        h, w = y.shape[-2:]
        lead = y.index.shape[:-2]
        index = np.take_along_axis(y.index.reshape(*lead, h * w), idx.reshape(*lead, -1), axis=-1).reshape(idx.shape)
    return VectorField(ops.pool_gather(y.u, idx), ops.pool_gather(y.v, idx), index)


def global_magnitude_pool(y: VectorField, spec: Optional[ScaleSpec] = None):
    """Per channel, the magnitude and angle (degrees) at the location of largest magnitude.

    Returns ``(magnitudes, angles)`` shaped ``(N, O)`` (or ``(O,)`` for an
    unbatched field). Angles come from the stored scale index when present.
    Ties go to the smallest flat index.
    """
    u, v, index = y.u, y.v, y.index
    single = u.ndim == 3
    if single:
        u, v = ops.reshape(u, (1,) + u.shape), ops.reshape(v, (1,) + v.shape)
        index = None if index is None else index[None]
    n, c, h, w = u.shape
    rho = np.hypot(u.data, v.data).reshape(n, c, h * w)
    loc = np.argmax(rho, axis=2)
    note_decision(loc)
    us, vs = ops.spatial_gather(u, loc), ops.spatial_gather(v, loc)
    mags = ops.magnitude(us, vs)
    if index is not None and spec is not None:
        idx = np.take_along_axis(index.reshape(n, c, h * w), loc[..., None], axis=2)[..., 0]
        ang = spec.angles()[idx]
    else:
        ang = np.degrees(np.arctan2(vs.data, us.data))
    angles = Tensor(ang.astype(u.dtype))
    if single:
        mags, angles = ops.reshape(mags, (c,)), Tensor(angles.data[0])
    return mags, angles
