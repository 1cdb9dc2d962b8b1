"""The three MNIST-scale networks and their checkpoint format.

* ``standard``: plain 7x7 convolutions (36/96/144 filters) with 2x2 max pooling.
* ``invariant``: scale-pyramid convolutions keeping only the magnitude.
* ``equivariant``: scale-pyramid convolutions producing vector fields; class
  logits use the 48 pooled magnitudes, the scale is an affine map of the 48
  pooled angles.

All three predict 10 class logits and one scale factor.
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from scalevec import ops
from scalevec.autograd import Tensor
from scalevec.data import SCALE_HIGH, SCALE_LOW
from scalevec.errors import ChecksumError, ConfigError, ParseError
from scalevec.layers import (ScaleSpec, VectorFilterBank, global_magnitude_pool, se_conv_magnitude,
                             se_conv_scalar, se_conv_vector, vec_maxpool2x2)

log = logging.getLogger(__name__)

VARIANTS = ("standard", "invariant", "equivariant")
DEFAULT_CHANNELS = {"standard": (36, 96, 144), "invariant": (12, 32, 48), "equivariant": (12, 32, 48)}
CKPT_MAGIC = b"MSCKPT"
CKPT_VERSION = 1
SCALE_PRIOR = 0.5 * (SCALE_LOW + SCALE_HIGH)


@dataclass
class ModelConfig:
    variant: str = "equivariant"
    channels: Optional[tuple] = None
    kernel: int = 7
    hidden: int = 256
    n_classes: int = 10
    scale_spec: Optional[ScaleSpec] = None
    shift_angles: bool = True
    notes: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.channels is None:
            self.channels = DEFAULT_CHANNELS[self.variant]
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError(f"need three positive channel counts, got {self.channels}")
        if self.hidden < 1:
            raise ConfigError("hidden width must be positive")
        if self.variant == "standard":
            if self.scale_spec is not None:
                msg = "scale_spec is ignored by the standard variant"
                log.warning(msg)
                self.notes.append(msg)
        elif self.scale_spec is None:
            self.scale_spec = ScaleSpec()
        if isinstance(self.scale_spec, dict):
            self.scale_spec = ScaleSpec(**self.scale_spec)

    def as_dict(self):
        d = asdict(self)
        d.pop("notes")
        d["channels"] = list(self.channels)
        d["scale_spec"] = None if self.scale_spec is None else self.scale_spec.as_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        spec = d.pop("scale_spec", None)
        return cls(scale_spec=None if spec is None else ScaleSpec(**spec), **d)


def _uniform(rng, shape, fan_in, dtype, gain=2.0):
    # gain 2 for layers feeding a rectifier or magnitude, 1 for linear outputs
    bound = np.sqrt(3.0 * gain / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Network:
    """Named parameters plus a forward pass returning ``(logits, scale)``."""

    def __init__(self, cfg: ModelConfig, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)

    def _add(self, name, shape, fan_in=None, zero=False, gain=2.0, fill=None):
        if fill is not None:
            data = np.full(shape, fill, self.dtype)
        elif zero:
            data = np.zeros(shape, self.dtype)
        else:
            data = _uniform(self._rng, shape, fan_in, self.dtype, gain)
        self.params[name] = Tensor(data, requires_grad=True, name=name)
        return self.params[name]

    def _dense_heads(self, features_in):
        cfg = self.cfg
        self._add("fc.weight", (cfg.hidden, features_in), features_in)
        self._add("fc.bias", (cfg.hidden,), zero=True)
        self._add("cls.weight", (cfg.n_classes, cfg.hidden), cfg.hidden, gain=1.0)
        self._add("cls.bias", (cfg.n_classes,), zero=True)

    def _scale_head(self, features_in):
        # starts as the constant mid-range predictor
        self._add("scale.weight", (1, features_in), zero=True)
        self._add("scale.bias", (1,), fill=SCALE_PRIOR)

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self, prefix=""):
        return int(sum(p.size for n, p in self.params.items() if n.startswith(prefix)))

    def state(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state):
        for n, arr in state.items():
            if n not in self.params:
                raise ConfigError(f"unknown parameter {n!r}")
            if arr.shape != self.params[n].shape:
                raise ConfigError(f"shape mismatch for {n}: {arr.shape} vs {self.params[n].shape}")
            self.params[n].data = np.asarray(arr, dtype=self.dtype)

    def _input(self, x):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 3:
            x = Tensor(x.data[:, None])
        return x

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError


class StandardCNN(Network):
    conv_gain = 2.0

    def __init__(self, cfg, seed=0, dtype=np.float32):
        super().__init__(cfg, seed, dtype)
        k = cfg.kernel
        c_in = 1
        for i, c in enumerate(cfg.channels, start=1):
            self._add(f"conv{i}.weight", (c, c_in, k, k), c_in * k * k, gain=self.conv_gain)
            self._add(f"conv{i}.bias", (c,), zero=True)
            c_in = c
        self._dense_heads(cfg.channels[-1] * 7 * 7)
        # the regression head starts from a constant prediction in every variant
        self._scale_head(cfg.hidden)

    def features(self, x):
        p, pad = self.params, self.cfg.kernel // 2
        h = self._input(x)
        for i in (1, 2, 3):
            h = ops.relu(ops.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], pad))
            if i < 3:
                h, _ = ops.maxpool2x2(h)
        return ops.flatten(h)

    def forward(self, x):
        p = self.params
        hid = ops.relu(ops.linear(self.features(x), p["fc.weight"], p["fc.bias"]))
        logits = ops.linear(hid, p["cls.weight"], p["cls.bias"])
        scale = ops.linear(hid, p["scale.weight"], p["scale.bias"])
        return logits, ops.reshape(scale, (scale.shape[0],))


class InvariantCNN(StandardCNN):
    """Scale-pooled magnitudes only; the winning-scale index is dropped after every layer."""

    # a magnitude keeps the full response energy, unlike a rectifier
    conv_gain = 1.0

    def features(self, x):
        p, spec = self.params, self.cfg.scale_spec
        h = self._input(x)
        for i in (1, 2, 3):
            h, _ = se_conv_magnitude(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], spec)
            if i < 3:
                h, _ = ops.maxpool2x2(h)
        return ops.flatten(h)


class EquivariantCNN(Network):
    def __init__(self, cfg, seed=0, dtype=np.float32):
        super().__init__(cfg, seed, dtype)
        k = cfg.kernel
        c1, c2, c3 = cfg.channels
        self._add("conv1.weight", (c1, 1, k, k), k * k, gain=1.0)
        self._add("conv1.bias", (c1,), zero=True)
        c_in = c1
        for i, c in ((2, c2), (3, c3)):
            fan = 2 * c_in * k * k
            self._add(f"conv{i}.wu", (c, c_in, k, k), fan, gain=1.0)
            self._add(f"conv{i}.wv", (c, c_in, k, k), fan, gain=1.0)
            self._add(f"conv{i}.bias", (c,), zero=True)
            c_in = c
        self._dense_heads(c3)
        self._scale_head(c3)

    def bank(self, i):
        p = self.params
        return VectorFilterBank(p[f"conv{i}.wu"], p[f"conv{i}.wv"], p[f"conv{i}.bias"])

    def features(self, x):
        """``(magnitudes, angles)`` of the globally pooled 48-channel field."""
        p, spec, shift = self.params, self.cfg.scale_spec, self.cfg.shift_angles
        y = se_conv_scalar(self._input(x), p["conv1.weight"], p["conv1.bias"], spec)
        y = vec_maxpool2x2(y)
        y = vec_maxpool2x2(se_conv_vector(y, self.bank(2), spec, shift))
        y = se_conv_vector(y, self.bank(3), spec, shift)
        return global_magnitude_pool(y, spec)

    def heads(self, mags, angles):
        p = self.params
        hid = ops.relu(ops.linear(mags, p["fc.weight"], p["fc.bias"]))
        logits = ops.linear(hid, p["cls.weight"], p["cls.bias"])
        # still affine in degrees; centring and dividing by the range keeps Adam steps sane
        spec = self.cfg.scale_spec
        unit = Tensor(((angles.data - spec.angles().mean()) / spec.angle_range).astype(self.dtype))
        scale = ops.linear(unit, p["scale.weight"], p["scale.bias"])
        return logits, ops.reshape(scale, (scale.shape[0],))

    def forward(self, x):
        return self.heads(*self.features(x))


_CLASSES = {"standard": StandardCNN, "invariant": InvariantCNN, "equivariant": EquivariantCNN}


def build_model(cfg: ModelConfig, seed=0, dtype=np.float32) -> Network:
    return _CLASSES[cfg.variant](cfg, seed, dtype)


def joint_loss(logits, labels, scale_pred, scale_true, lam=1.0):
    """Cross entropy plus ``lam`` times the squared scale error, both batch means."""
    if lam < 0:
        raise ConfigError("loss weight must be non-negative")
    ce = ops.softmax_cross_entropy(logits, labels)
    target = np.asarray(scale_true, dtype=scale_pred.dtype).reshape(scale_pred.shape)
    return ops.add(ce, ops.scale(ops.mse(scale_pred, target), lam))


# -- checkpoints -------------------------------------------------------------------

def checkpoint_bytes(model: Network, extra=None) -> bytes:
    config = {"model": model.cfg.as_dict()}
    if extra:
        config.update(extra)
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", p.ndim),
                  struct.pack(f"<{p.ndim}I", *p.shape), p.data.astype("<f4").tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Network, path, extra=None):
    Path(path).write_bytes(checkpoint_bytes(model, extra))


def parse_checkpoint(data: bytes):
    """Return ``(config dict, {name: float32 array})``."""
    if data[:6] != CKPT_MAGIC:
        raise ParseError("bad checkpoint magic", 0)
    if len(data) < 16:
        raise ParseError("truncated checkpoint", len(data))
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch", len(data) - 4)
    (version,) = struct.unpack_from("<H", data, 6)
    if version != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 6)
    (clen,) = struct.unpack_from("<I", data, 8)
    pos = 12
    config = json.loads(data[pos:pos + clen])
    pos += clen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        n = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    if pos != len(data) - 4:
        raise ParseError("checkpoint has trailing bytes", pos)
    return config, params


def load_checkpoint(path, dtype=np.float32):
    """Rebuild the network stored at ``path``. Returns ``(model, config dict)``."""
    config, params = parse_checkpoint(Path(path).read_bytes())
    model = build_model(ModelConfig.from_dict(config["model"]), dtype=dtype)
    model.load_state(params)
    return model, config
