"""Binary container helpers."""

import numpy as np
import pytest

from evosvd import binio
from evosvd.errors import CorruptCheckpoint


def test_scalar_packs_are_little_endian():
    assert binio.pack_u16(0x0201) == b"\x01\x02"
    assert binio.pack_u32(0x04030201) == b"\x01\x02\x03\x04"
    assert binio.pack_u64(1) == b"\x01" + b"\x00" * 7


def test_str_round_trip():
    data = binio.pack_str("layer0.q") + binio.pack_u32(5)
    r = binio.Reader(data)
    assert r.string() == "layer0.q"
    assert r.u32() == 5
    r.done()


def test_str_too_long():
    with pytest.raises(ValueError):
        binio.pack_str("x" * 70000)


def test_f64_array_round_trip_exact():
    a = np.array([[1.5, -2.25], [1e-300, 3.0]])
    r = binio.Reader(binio.pack_f64_array(a))
    assert np.array_equal(r.f64_array((2, 2)), a)
    r.done()


def test_f32_array_rounds_to_f32():
    a = np.array([0.1, 1.0])
    got = binio.Reader(binio.pack_f32_array(a)).f32_array((2,))
    assert got.dtype == np.float64
    assert got[0] == np.float32(0.1)
    assert got[1] == 1.0


def test_truncation_raises():
    r = binio.Reader(b"\x01\x02\x03")
    with pytest.raises(CorruptCheckpoint):
        r.u32()


def test_bad_magic():
    r = binio.Reader(b"XXXX")
    with pytest.raises(CorruptCheckpoint):
        r.expect_magic(b"ESSA")


def test_trailing_bytes_detected():
    r = binio.Reader(binio.pack_u16(3) + b"junk")
    r.u16()
    with pytest.raises(CorruptCheckpoint):
        r.done()


def test_bad_utf8_string():
    r = binio.Reader(binio.pack_u16(2) + b"\xff\xfe")
    with pytest.raises(CorruptCheckpoint):
        r.string()
