"""Reader for the binary text-feature interchange format.

Layout, all little-endian:
    magic "ELFF" | version u32 | record_count u32
    per record: prompt_id_len u32, prompt_id UTF-8,
                token_count u32 (<= 128), dim u32,
                token_count * dim float32

A separate exporter tool writes these files from a real pretrained encoder;
this reader is the only thing the core needs to consume them.
"""

import struct

import numpy as np

MAGIC = b"ELFF"
VERSION = 1
MAX_TOKENS = 128


class FeatureFileError(ValueError):
    """Malformed feature file; the message carries the byte offset."""


def read_feature_file(path):
    """Returns a list of (prompt_id, features [token_count, dim] float32)."""
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise FeatureFileError(f"truncated while reading {what} at offset {off}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FeatureFileError("bad magic at offset 0, expected ELFF")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FeatureFileError(f"unsupported version {version} at offset 4")
    (count,) = struct.unpack("<I", take(4, "record count"))
    records = []
    for i in range(count):
        (id_len,) = struct.unpack("<I", take(4, f"record {i} id length"))
        prompt_id = take(id_len, f"record {i} id").decode("utf-8")
        token_count, dim = struct.unpack("<II", take(8, f"record {i} dims"))
        if token_count > MAX_TOKENS:
            raise FeatureFileError(
                f"record {i} ({prompt_id!r}) token_count {token_count} exceeds {MAX_TOKENS}"
                f" at offset {off - 8}")
        if token_count == 0 or dim == 0:
            raise FeatureFileError(f"record {i} has empty dimensions at offset {off - 8}")
        raw = take(4 * token_count * dim, f"record {i} floats")
        feats = np.frombuffer(raw, dtype="<f4").reshape(token_count, dim).copy()
        if not np.isfinite(feats).all():
            raise FeatureFileError(f"record {i} ({prompt_id!r}) contains non-finite floats")
        records.append((prompt_id, feats))
    if off != len(data):
        raise FeatureFileError(f"{len(data) - off} trailing bytes after record {count - 1}")
    return records
