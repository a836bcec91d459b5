import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fisheyerect import tensorio
from fisheyerect.tensorio import TensorFormatError


def test_header_layout():
    buf = tensorio.encode(np.arange(6, dtype=np.uint8).reshape(2, 3))
    assert buf[:4] == b"SFIR"
    assert buf[4:7] == bytes([1, 2, 2])
    assert struct.unpack("<2I", buf[7:15]) == (2, 3)
    assert buf[15:] == bytes(range(6))


def test_float_payload_little_endian_f32():
    buf = tensorio.encode(np.array([1.5], dtype=np.float64))
    assert buf[5] == 1
    assert buf[-4:] == struct.pack("<f", 1.5)


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.lists(st.integers(1, 5), min_size=0, max_size=4).map(tuple)))
def test_round_trip_u8(a):
    b = tensorio.decode(tensorio.encode(a))
    assert b.dtype == np.uint8 and np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(1, 5), min_size=1, max_size=3).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_f32(a):
    b = tensorio.decode(tensorio.encode(a))
    assert b.dtype == np.float32 and np.array_equal(a, b)


def test_file_round_trip(tmp_path):
    a = np.random.default_rng(0).random((4, 5, 2)).astype(np.float32)
    tensorio.save(tmp_path / "a.sfir", a)
    assert np.array_equal(tensorio.load(tmp_path / "a.sfir"), a)


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + b"\x02" + b[5:],
    lambda b: b[:5] + b"\x09" + b[6:],
    lambda b: b[:-1],
    lambda b: b[:3],
])
def test_corrupt_rejected(mutate):
    good = tensorio.encode(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(TensorFormatError):
        tensorio.decode(mutate(good))


def test_unsupported_dtype():
    with pytest.raises(TensorFormatError):
        tensorio.encode(np.zeros(3, dtype=np.int32))
