"""Self-describing binary checkpoint container.

Layout: magic "UFOCKPT1", u32 version, u32 digest length + digest bytes,
u32 tensor count, then per tensor: u32 name length + utf-8 name, u32 rank,
u32 dims, u8 dtype tag (0 = f32, 1 = f64), raw little-endian values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"UFOCKPT1"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(IOError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_digest: str = "") -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        digest = config_digest.encode("utf-8")
        f.write(struct.pack("<I", len(digest)))
        f.write(digest)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _TAG_FOR:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(struct.pack("<B", _TAG_FOR[arr.dtype]))
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    off = 8

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals[0] if len(vals) == 1 else vals

    version = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest_len = take("<I")
    digest = data[off:off + digest_len].decode("utf-8")
    off += digest_len
    count = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = take("<I")
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        rank = take("<I")
        shape = tuple(take("<I") for _ in range(rank))
        tag = take("<B")
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: unknown dtype tag {tag}")
        dt = _DTYPE_TAGS[tag]
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype=dt, count=n, offset=off).reshape(shape)
        off += n * dt.itemsize
        tensors[name] = arr.copy()
    return digest, tensors
