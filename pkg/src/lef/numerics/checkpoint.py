"""Flat binary checkpoint format.

Layout: 8-byte magic "LEFCKPT1", then for each parameter in name order:
name length (u32 LE), UTF-8 name bytes, rank (u32 LE), dims (u32 LE each),
payload (f32 LE, row-major).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LEFCKPT1"


def save_checkpoint(path, params: dict[str, "np.ndarray | object"]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name in sorted(params):
            arr = params[name]
            data = np.asarray(getattr(arr, "data", arr), dtype=np.float32)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<I", dim))
            f.write(data.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    out: dict[str, np.ndarray] = {}
    off = 8
    while off < len(raw):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        out[name] = arr.astype(np.float64)
    return out
