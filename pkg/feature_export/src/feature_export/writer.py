"""Writer for the binary feature interchange format.

Layout, all little-endian:
    magic "ELFF" | version u32 | record_count u32
    per record: prompt_id_len u32, prompt_id UTF-8,
                token_count u32 (<= 128), dim u32,
                token_count * dim float32

The consuming side reads these files byte-exactly; floats are written as
32-bit regardless of the encoder's native precision.
"""

import struct

import numpy as np

MAGIC = b"ELFF"
VERSION = 1
MAX_TOKENS = 128


class FeatureWriteError(ValueError):
    pass


def write_feature_file(path, records) -> None:
    """records: iterable of (prompt_id, [token_count, dim] array)."""
    records = list(records)
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<I", VERSION)
    payload += struct.pack("<I", len(records))
    for prompt_id, feats in records:
        feats = np.ascontiguousarray(feats, dtype="<f4")
        if feats.ndim != 2:
            raise FeatureWriteError(f"{prompt_id!r}: features must be [tokens, dim]")
        if feats.shape[0] == 0 or feats.shape[0] > MAX_TOKENS:
            raise FeatureWriteError(
                f"{prompt_id!r}: token count {feats.shape[0]} outside [1, {MAX_TOKENS}]")
        if not np.isfinite(feats).all():
            raise FeatureWriteError(f"{prompt_id!r}: refusing to write non-finite floats")
        raw = prompt_id.encode("utf-8")
        payload += struct.pack("<I", len(raw))
        payload += raw
        payload += struct.pack("<II", feats.shape[0], feats.shape[1])
        payload += feats.tobytes()
    # single write so a failed validation never leaves a partial file
    with open(path, "wb") as fh:
        fh.write(payload)
