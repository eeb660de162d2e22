"""Checkpoint container: byte-level format and round-trips."""

import struct

import numpy as np
import pytest

from gridlang.checkpoint import (MAGIC, CheckpointError, load_checkpoint,
                                 save_checkpoint)


def test_roundtrip_preserves_values_and_shapes(tmp_path):
    tensors = {
        "a": np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32),
        "b.c": np.arange(6, dtype=np.float64).reshape(2, 3),
        "scalar": np.float32(1.5).reshape(()),
    }
    path = tmp_path / "m.bin"
    save_checkpoint(path, tensors, "digest123")
    digest, loaded = load_checkpoint(path)
    assert digest == "digest123"
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].dtype == tensors[k].dtype
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_magic_bytes_lead_the_file(tmp_path):
    path = tmp_path / "m.bin"
    save_checkpoint(path, {"x": np.zeros(2, dtype=np.float32)})
    assert path.read_bytes()[:8] == MAGIC


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_unknown_version_rejected(tmp_path):
    path = tmp_path / "m.bin"
    save_checkpoint(path, {"x": np.zeros(2, dtype=np.float32)})
    data = bytearray(path.read_bytes())
    data[8:12] = struct.pack("<I", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "m.bin", {"x": np.zeros(2, dtype=np.int32)})


def test_empty_digest_allowed(tmp_path):
    path = tmp_path / "m.bin"
    save_checkpoint(path, {"x": np.ones(1, dtype=np.float32)})
    digest, loaded = load_checkpoint(path)
    assert digest == ""
    np.testing.assert_array_equal(loaded["x"], [1.0])


def test_insertion_order_preserved(tmp_path):
    tensors = {f"t{i}": np.full(1, i, dtype=np.float32) for i in range(5)}
    path = tmp_path / "m.bin"
    save_checkpoint(path, tensors)
    _, loaded = load_checkpoint(path)
    assert list(loaded) == list(tensors)
