"""Seeding, hashing, and init helpers shared across modules."""

import hashlib
import zlib

import numpy as np


def rng_from(*parts) -> np.random.Generator:
    """Deterministic generator keyed by an arbitrary mix of ints and strings.

    Strings are folded in via crc32 so the entropy pool is stable across
    runs and platforms.
    """
    entropy = []
    for p in parts:
        if isinstance(p, str):
            entropy.append(zlib.crc32(p.encode("utf-8")))
        elif isinstance(p, (int, np.integer)):
            entropy.append(int(p) & 0xFFFFFFFF)
        else:
            raise TypeError(f"rng_from accepts ints and strings, got {type(p)!r}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with resampling outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(dtype)


def hash_arrays(named_arrays) -> str:
    """sha256 over (name, shape, raw bytes) of arrays sorted by name.

    Used for the freeze contract: bit-identical parameter sets hash equal.
    """
    h = hashlib.sha256()
    for name in sorted(named_arrays):
        arr = np.ascontiguousarray(named_arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(str(arr.dtype).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()
