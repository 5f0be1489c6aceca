"""Binary tensor files, PGM images and checkpoints.

Tensor file (``.bmt``)::

    b"BMT1" | u32 rank | rank x u32 extents | f32 payload (row-major)

Checkpoint::

    b"BMCK" | u32 count | count x (u16 name_len | name | tensor record)

All integers and floats are little-endian.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

TENSOR_MAGIC = b"BMT1"
CKPT_MAGIC = b"BMCK"


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise DataError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def dump_tensor(arr, f):
    arr = np.asarray(arr)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(f):
    if _read_exact(f, 4) != TENSOR_MAGIC:
        raise DataError("bad tensor magic (expected BMT1)")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4")
    return data.astype(np.float64).reshape(shape)


def write_tensor(path, arr):
    with open(path, "wb") as f:
        dump_tensor(arr, f)


def read_tensor(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such tensor file: {path}")
    with open(path, "rb") as f:
        return load_tensor(f)


def write_checkpoint(path, tensors):
    """Write an ordered ``{name: array}`` mapping."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            dump_tensor(arr, f)


def read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}")
    out = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CKPT_MAGIC:
            raise DataError("bad checkpoint magic (expected BMCK)")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, n).decode("utf-8")
            out[name] = load_tensor(f)
    return out


def to_gray8(img, lo=None, hi=None):
    """Linearly map a 2-D array onto 0..255."""
    img = np.asarray(img, dtype=np.float64)
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    scaled = (img - lo) / (hi - lo) * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def write_pgm(path, img, lo=None, hi=None):
    """Write a 2-D slice as binary PGM (P5, maxval 255)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise DataError(f"PGM export needs a 2-D slice, got shape {img.shape}")
    data = img if img.dtype == np.uint8 else to_gray8(img, lo, hi)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path):
    """Read a binary P5 PGM (maxval <= 255) as float64 in [0, 1]."""
    raw = Path(path).read_bytes()
    stream = io.BytesIO(raw)
    tokens = []
    while len(tokens) < 4:
        line = stream.readline()
        if not line:
            raise DataError(f"truncated PGM header in {path}")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    if tokens[0] != b"P5":
        raise DataError(f"{path}: only binary P5 PGM is supported")
    w, h, maxval = (int(t) for t in tokens[1:4])
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PGM not supported")
    data = np.frombuffer(_read_exact(stream, w * h), dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / maxval
