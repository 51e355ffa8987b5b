"""Versioned binary container for named float arrays.

Layout (all integers little-endian unsigned 64-bit):

    magic   5 bytes  b"TADA1"
    version u64      currently 1
    count   u64      number of named arrays
    then per array:
      name_len u64, name bytes (utf-8), rank u64, extents u64 * rank,
      row-major float32 little-endian payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ValidationError

MAGIC = b"TADA1"
VERSION = 1


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<QQ", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            raw = name.encode("utf-8")
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)
            f.write(struct.pack("<Q", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<Q", extent))
            f.write(arr.astype("<f4").tobytes(order="C"))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<QQ", f.read(16))
        if version != VERSION:
            raise ValidationError(f"{path}: unsupported format version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<Q", f.read(8))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<Q", f.read(8))
            shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            out[name] = np.array(data)  # own the memory
        return out
