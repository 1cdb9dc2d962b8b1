"""MNIST ingestion and the MNIST-scale dataset.

MNIST-scale: every digit is shrunk by a factor drawn from U(0.3, 1), placed
in the middle of a zero 28x28 canvas, and 10k/2k/50k train/val/test
examples are drawn from the pooled 70k images. Randomness comes from a
PCG32 stream so that folds are reproducible bit for bit.

Fold file layout (little-endian)::

    b"MSCL"  u16 version  u32 n_train  u32 n_val  u32 n_test
    per split: n records of (u8 label, f32 scale, 784 x f32 pixels), then u32 CRC32
"""
from __future__ import annotations

import gzip
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from scalevec._coords import axis_taps
from scalevec.errors import ChecksumError, ConfigError, InputError, ParseError
from scalevec.layers import round_half_away

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SIDE = 28
SCALE_LOW, SCALE_HIGH = 0.3, 1.0
SPLIT_SIZES = (10000, 2000, 50000)
FOLD_MAGIC = b"MSCL"
FOLD_VERSION = 1
# PCG32 stream selector shared by every fold; the fold seed is the initial state.
PCG_STREAM = 0x4D53434C

RECORD_DTYPE = np.dtype([("label", "u1"), ("scale", "<f4"), ("pixels", "<f4", (SIDE * SIDE,))])

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


# -- PCG32 ---------------------------------------------------------------------

class PCG32:
    """Minimal PCG-XSH-RR 64/32 generator (O'Neill's ``pcg32_random_r``).

    Seeded like ``pcg32_srandom_r(initstate, initseq)``.
    """

    _MULT = 6364136223846793005
    _MASK = (1 << 64) - 1

    def __init__(self, initstate, initseq=PCG_STREAM):
        self.state = 0
        self.inc = ((initseq << 1) | 1) & self._MASK
        self.next_u32()
        self.state = (self.state + initstate) & self._MASK
        self.next_u32()

    def next_u32(self):
        old = self.state
        self.state = (old * self._MULT + self.inc) & self._MASK
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def uniform(self):
        """Double in [0, 1) with 53 random bits (27 + 26 from two draws)."""
        a = self.next_u32() >> 5
        b = self.next_u32() >> 6
        return (a * 67108864.0 + b) / 9007199254740992.0

    def bounded(self, bound):
        """Unbiased integer in [0, bound) by rejection."""
        threshold = (0x100000000 - bound) % bound
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % bound


# -- IDX ---------------------------------------------------------------------

def parse_idx(data: bytes) -> np.ndarray:
    """Decode an uncompressed IDX image (0x803) or label (0x801) file.

    Images come back as float64 ``(n, rows, cols)`` scaled to [0, 1];
    labels as int64 ``(n,)``.
    """
    if len(data) < 4:
        raise ParseError("truncated header", 0)
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise ParseError(f"unknown magic 0x{magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError("truncated dimension header", len(data))
    dims = struct.unpack_from(">" + "I" * ndim, data, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - header < count:
        raise ParseError(f"payload holds {len(data) - header} bytes, header promises {count}",
                         len(data))
    if len(data) - header > count:
        raise ParseError(f"{len(data) - header - count} trailing bytes after payload", header + count)
    raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=header)
    if magic == IMAGE_MAGIC:
        return raw.reshape(dims).astype(np.float64) / 255.0
    return raw.astype(np.int64)


def serialize_idx(array) -> bytes:
    """Inverse of :func:`parse_idx`. Float images are mapped back to bytes via ``round(x*255)``."""
    a = np.asarray(array)
    if a.ndim == 3:
        magic = IMAGE_MAGIC
        payload = np.rint(a * 255.0) if a.dtype.kind == "f" else a
    elif a.ndim == 1:
        magic = LABEL_MAGIC
        payload = a
    else:
        raise InputError(f"IDX needs a 1-D label or 3-D image array, got {a.ndim}-D")
    if payload.min(initial=0) < 0 or payload.max(initial=0) > 255:
        raise InputError("values do not fit in unsigned bytes")
    head = struct.pack(">I", magic) + struct.pack(">" + "I" * a.ndim, *a.shape)
    return head + payload.astype(np.uint8).tobytes()


def read_idx(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


def load_mnist(root=None):
    """Pool the MNIST train and test sets found under ``root`` into 70k examples.

    ``root`` defaults to ``$SCALEVEC_DATA_DIR``. Both plain and ``.gz``
    files with the standard names are accepted.
    """
    root = Path(root or os.environ.get("SCALEVEC_DATA_DIR", "."))
    images, labels = [], []
    for img_name, lbl_name in MNIST_FILES.values():
        img_path, lbl_path = _find(root, img_name), _find(root, lbl_name)
        images.append(read_idx(img_path))
        labels.append(read_idx(lbl_path))
    return np.concatenate(images), np.concatenate(labels)


def _find(root, name):
    for cand in (root / name, root / (name + ".gz"), root / name.replace("-idx", ".idx")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{name} not found under {root}")


# -- MNIST-scale -------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    image: np.ndarray
    label: int
    scale: float


def rescale_and_pad(image, s):
    """Shrink a 28x28 image by ``s`` (bilinear) and centre it on a zero canvas.

    When the margin is odd the extra row/column of zeros goes to the
    bottom/right.
    """
    return rescale_and_pad_batch(np.asarray(image)[None], np.array([s]))[0]


def _resize_exact(images, n):
    # elementwise taps only: no BLAS, so results do not depend on the backend or thread count
    lo, hi, f = axis_taps(SIDE, n)
    rows = images[:, lo, :] * (1.0 - f)[:, None] + images[:, hi, :] * f[:, None]
    return rows[:, :, lo] * (1.0 - f) + rows[:, :, hi] * f


def rescale_and_pad_batch(images, scales):
    images = np.asarray(images, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    if np.any(scales <= 0) or np.any(scales > 1):
        raise InputError("scale factors must lie in (0, 1]")
    out = np.zeros((len(images), SIDE, SIDE))
    sizes = np.array([max(1, round_half_away(SIDE * s)) for s in scales])
    for n in np.unique(sizes):
        sel = np.flatnonzero(sizes == n)
        small = _resize_exact(images[sel], int(n)) if n != SIDE else images[sel]
        off = (SIDE - n) // 2
        out[sel, off:off + n, off:off + n] = small
    return out


def content_size(scale) -> int:
    """Side of the non-zero square for a given scale factor."""
    return max(1, round_half_away(SIDE * float(scale)))


@dataclass
class Split:
    images: np.ndarray  # (n, 28, 28) float32
    labels: np.ndarray  # (n,) int64
    scales: np.ndarray  # (n,) float32
    source: Optional[np.ndarray] = None  # indices into the pooled source set

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return SampleRecord(self.images[i], int(self.labels[i]), float(self.scales[i]))

    def head(self, n):
        src = None if self.source is None else self.source[:n]
        return Split(self.images[:n], self.labels[:n], self.scales[:n], src)

    def batch(self, dtype=np.float32):
        """Images as an ``(n, 1, 28, 28)`` network input."""
        return self.images[:, None].astype(dtype, copy=False)


@dataclass
class Fold:
    train: Split
    val: Split
    test: Split
    seed: Optional[int] = None

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def generate_fold(images, labels, seed, sizes=SPLIT_SIZES) -> Fold:
    """One MNIST-scale realisation.

    Draw order: one scale per pooled image (index order), then a
    Fisher-Yates shuffle of the pool; the first ``sizes[0]`` shuffled
    images form the training split, the next ``sizes[1]`` validation and
    the next ``sizes[2]`` test.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    n = len(images)
    need = int(sum(sizes))
    if n < need:
        raise InputError(f"need {need} source images, got {n}")
    if len(labels) != n:
        raise InputError("image and label counts differ")
    rng = PCG32(int(seed) & ((1 << 64) - 1))
    span = SCALE_HIGH - SCALE_LOW
    scales = np.array([SCALE_LOW + span * rng.uniform() for _ in range(n)]).astype(np.float32)
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.bounded(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    perm = np.array(perm[:need], dtype=np.int64)
    bounds = np.cumsum([0, *sizes])
    parts = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = perm[a:b]
        imgs = rescale_and_pad_batch(images[idx], scales[idx].astype(np.float64)).astype(np.float32)
        parts.append(Split(imgs, labels[idx].astype(np.int64), scales[idx], idx))
    return Fold(*parts, seed=int(seed))


def generate_folds(images, labels, n_folds=6, base_seed=0, sizes=SPLIT_SIZES):
    """``n_folds`` realisations; fold ``f`` uses seed ``base_seed + f``."""
    return [generate_fold(images, labels, base_seed + f, sizes) for f in range(n_folds)]


# -- fold files ----------------------------------------------------------------------

def _split_bytes(split: Split) -> bytes:
    rec = np.zeros(len(split), dtype=RECORD_DTYPE)
    rec["label"] = split.labels
    rec["scale"] = split.scales
    rec["pixels"] = np.asarray(split.images, dtype=np.float32).reshape(len(split), -1)
    return rec.tobytes()


def fold_bytes(fold: Fold) -> bytes:
    parts = [FOLD_MAGIC, struct.pack("<H", FOLD_VERSION),
             struct.pack("<III", len(fold.train), len(fold.val), len(fold.test))]
    for split in (fold.train, fold.val, fold.test):
        body = _split_bytes(split)
        parts += [body, struct.pack("<I", zlib.crc32(body))]
    return b"".join(parts)


def fold_checksum(data: bytes) -> int:
    """CRC32 identifying a fold file.

    Covers everything but the trailing split checksum: the CRC of a block
    that ends in its own CRC is a constant, so it would not tell folds apart.
    """
    return zlib.crc32(data[:-4])


def save_fold(fold: Fold, path) -> int:
    """Write ``fold`` and return its :func:`fold_checksum`."""
    data = fold_bytes(fold)
    Path(path).write_bytes(data)
    return fold_checksum(data)


def parse_fold(data: bytes) -> Fold:
    if data[:4] != FOLD_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}", 0)
    if len(data) < 18:
        raise ParseError("truncated header", len(data))
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FOLD_VERSION:
        raise ParseError(f"unsupported fold version {version}", 4)
    counts = struct.unpack_from("<III", data, 6)
    pos = 18
    splits = []
    for name, n in zip(("train", "val", "test"), counts):
        size = n * RECORD_DTYPE.itemsize
        if pos + size + 4 > len(data):
            raise ParseError(f"{name} split truncated", len(data))
        body = data[pos:pos + size]
        (crc,) = struct.unpack_from("<I", data, pos + size)
        if zlib.crc32(body) != crc:
            raise ChecksumError(f"CRC32 mismatch in {name} split", pos + size)
        rec = np.frombuffer(body, dtype=RECORD_DTYPE)
        splits.append(Split(rec["pixels"].reshape(n, SIDE, SIDE).copy(), rec["label"].astype(np.int64),
                            rec["scale"].copy()))
        pos += size + 4
    if pos != len(data):
        raise ParseError(f"{len(data) - pos} unexpected trailing bytes", pos)
    return Fold(*splits)


def load_fold(path) -> Fold:
    return parse_fold(Path(path).read_bytes())


def scale_stats(scales):
    s = np.asarray(scales, dtype=np.float64)
    return {"mean": float(s.mean()), "sd": float(s.std()), "min": float(s.min()), "max": float(s.max())}


def check_sizes(sizes):
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or min(sizes) < 1:
        raise ConfigError(f"split sizes must be three positive integers, got {sizes}")
    return sizes
