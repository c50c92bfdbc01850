"""Binary tensor container round-trips and format validation."""

import struct

import numpy as np
import pytest

from svtc import container
from svtc.container import ContainerError, load_tensors, save_tensors


def test_round_trip_preserves_bytes_and_order(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "x_v": rng.standard_normal((5, 3)),
        "weights.layer.w": rng.standard_normal((2, 2, 4)),
        "scalar": np.array(3.5),
        "unicode-name-é": rng.standard_normal(7),
    }
    path = tmp_path / "t.svt"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert list(loaded) == list(tensors)
    for name, arr in tensors.items():
        assert loaded[name].dtype == np.float64
        np.testing.assert_array_equal(loaded[name], np.asarray(arr, dtype=np.float64))
        assert loaded[name].tobytes() == np.asarray(arr, dtype=np.float64).tobytes()


def test_header_layout(tmp_path):
    path = tmp_path / "t.svt"
    save_tensors(path, {"a": np.zeros((2, 3))})
    raw = path.read_bytes()
    assert raw[:4] == b"SVTC"
    version, count = struct.unpack_from("<II", raw, 4)
    assert version == 1 and count == 1
    (nlen,) = struct.unpack_from("<H", raw, 12)
    assert raw[14 : 14 + nlen] == b"a"
    rank = raw[14 + nlen]
    assert rank == 2
    extents = struct.unpack_from("<2Q", raw, 15 + nlen)
    assert extents == (2, 3)
    assert raw[15 + nlen + 16] == 0  # dtype tag f64


def test_deterministic_bytes(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a": rng.standard_normal((4, 4)), "b": rng.standard_normal(3)}
    p1, p2 = tmp_path / "1.svt", tmp_path / "2.svt"
    save_tensors(p1, tensors)
    save_tensors(p2, tensors)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.svt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ContainerError):
        load_tensors(path)


def test_truncated_rejected(tmp_path):
    path = tmp_path / "t.svt"
    save_tensors(path, {"a": np.ones((4, 4))})
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(ContainerError):
        load_tensors(path)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "t.svt"
    save_tensors(path, {"a": np.ones(2)})
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        load_tensors(path)


def test_empty_container(tmp_path):
    path = tmp_path / "t.svt"
    save_tensors(path, {})
    assert load_tensors(path) == {}
