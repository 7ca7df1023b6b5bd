"""Binary checkpoint format shared by connector and denoiser parameter sets.

Layout, all little-endian:
    magic "SCKP" | version u32 | meta_len u32 | meta JSON (UTF-8)
    | tensor_count u32 | per tensor: name_len u32, name, ndim u32,
      dims u32 each, float32 data

Floats are stored as 32-bit exactly as held in memory, so a save/load
round trip is bit-exact.
"""

import json
import struct

import numpy as np

from .autodiff import Tensor

MAGIC = b"SCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, meta: dict, params: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = params[name]
            if isinstance(arr, Tensor):
                arr = arr.data
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (meta, {name: float32 ndarray})."""
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
        params[name] = arr
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes after tensors")
    return meta, params
