"""Bit-exact checkpoint round trips and malformed-input rejection."""

import struct

import numpy as np
import pytest

from semcond.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "a.w": rng.normal(size=(7, 5)).astype(np.float32),
        "a.b": rng.normal(size=(5,)).astype(np.float32),
        "deep.block0.conv.w": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
    }
    meta = {"kind": "denoiser", "config": {"x": 1}}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, meta, params)
    meta2, back = load_checkpoint(path)
    assert meta2 == meta
    assert set(back) == set(params)
    for k in params:
        assert back[k].dtype == np.float32
        assert back[k].tobytes() == params[k].tobytes(), k


def test_save_is_deterministic(tmp_path):
    params = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    p1, p2 = tmp_path / "a", tmp_path / "b"
    save_checkpoint(p1, {"kind": "connector"}, params)
    save_checkpoint(p2, {"kind": "connector"}, params)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncation_rejected(tmp_path):
    path = tmp_path / "ck"
    save_checkpoint(path, {"kind": "x"}, {"w": np.ones(4, dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "ck"
    save_checkpoint(path, {"kind": "x"}, {"w": np.ones(4, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "ck"
    save_checkpoint(path, {"kind": "x"}, {})
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
