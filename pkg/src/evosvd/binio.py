"""Little-endian binary container helpers shared by the checkpoint formats."""

from __future__ import annotations

import struct

import numpy as np

from .errors import CorruptCheckpoint


def pack_u16(v: int) -> bytes:
    return struct.pack("<H", v)


def pack_u32(v: int) -> bytes:
    return struct.pack("<I", v)


def pack_u64(v: int) -> bytes:
    return struct.pack("<Q", v)


def pack_f32_array(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def pack_f64_array(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for u16 length prefix")
    return pack_u16(len(raw)) + raw


class Reader:
    """Sequential reader over checkpoint bytes; truncation -> CorruptCheckpoint."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpoint("truncated data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f32_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        raw = self.take(4 * n)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)

    def f64_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        raw = self.take(8 * n)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    def string(self) -> str:
        n = self.u16()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptCheckpoint(f"bad utf-8 string: {e}") from e

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise CorruptCheckpoint(f"bad magic {got!r}, expected {magic!r}")

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CorruptCheckpoint(f"{len(self.data) - self.pos} trailing bytes")
