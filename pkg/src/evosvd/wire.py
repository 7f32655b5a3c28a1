"""Binary message framing for coordinator/worker traffic.

Frame layout, all little-endian:

    u32  frameLength   (= 1 + 4 + len(payload); excludes this field)
    u8   msgType
    u32  crc32(payload)
    …    payload

Six message types cover the whole protocol. Candidate evaluation moves
only seeds and scalar rewards, so EvalJob and RewardReport payloads have
fixed sizes (52 and 32 bytes) independent of model or adapter shape.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from .errors import FrameCorrupt, ProtocolViolation

PROTOCOL_VERSION = 1
HASH_LEN = 32
_MAX_FRAME = 1 << 20

MSG_HELLO = 1
MSG_HELLO_ACK = 2
MSG_EVAL_JOB = 3
MSG_REWARD_REPORT = 4
MSG_SHUTDOWN = 5
MSG_JOB_ERROR = 6

ACK_OK = 0
ACK_CONFIG_MISMATCH = 1
ACK_BAD_VERSION = 2


@dataclass(frozen=True)
class Hello:
    version: int
    config_hash: bytes


@dataclass(frozen=True)
class HelloAck:
    status: int
    worker_id: int


@dataclass(frozen=True)
class EvalJob:
    generation: int
    index: int
    seed: int
    config_hash: bytes


@dataclass(frozen=True)
class RewardReport:
    generation: int
    index: int
    reward: float
    eval_millis: int
    worker_id: int


@dataclass(frozen=True)
class Shutdown:
    pass


@dataclass(frozen=True)
class JobError:
    generation: int
    index: int
    code: int
    message: str


Message = Hello | HelloAck | EvalJob | RewardReport | Shutdown | JobError


def _check_hash(h: bytes) -> bytes:
    if len(h) != HASH_LEN:
        raise ProtocolViolation(f"config hash must be {HASH_LEN} bytes, got {len(h)}")
    return h


def _encode_payload(msg: Message) -> tuple[int, bytes]:
    if isinstance(msg, Hello):
        return MSG_HELLO, struct.pack("<I", msg.version) + _check_hash(msg.config_hash)
    if isinstance(msg, HelloAck):
        return MSG_HELLO_ACK, struct.pack("<II", msg.status, msg.worker_id)
    if isinstance(msg, EvalJob):
        return MSG_EVAL_JOB, (struct.pack("<QIQ", msg.generation, msg.index, msg.seed)
                              + _check_hash(msg.config_hash))
    if isinstance(msg, RewardReport):
        return MSG_REWARD_REPORT, struct.pack(
            "<QIdQI", msg.generation, msg.index, msg.reward,
            msg.eval_millis, msg.worker_id)
    if isinstance(msg, Shutdown):
        return MSG_SHUTDOWN, b""
    if isinstance(msg, JobError):
        text = msg.message.encode()[:0xFFFF]
        return MSG_JOB_ERROR, (struct.pack("<QII", msg.generation, msg.index, msg.code)
                               + struct.pack("<H", len(text)) + text)
    raise ProtocolViolation(f"cannot encode {type(msg).__name__}")


def encode_frame(msg: Message) -> bytes:
    mtype, payload = _encode_payload(msg)
    header = struct.pack("<IBI", 1 + 4 + len(payload), mtype,
                         zlib.crc32(payload) & 0xFFFFFFFF)
    return header + payload


def _need(payload: bytes, size: int, what: str) -> None:
    if len(payload) != size:
        raise FrameCorrupt(f"{what}: payload is {len(payload)} bytes, expected {size}")


def _decode_payload(mtype: int, payload: bytes) -> Message:
    if mtype == MSG_HELLO:
        _need(payload, 4 + HASH_LEN, "Hello")
        return Hello(struct.unpack("<I", payload[:4])[0], payload[4:])
    if mtype == MSG_HELLO_ACK:
        _need(payload, 8, "HelloAck")
        return HelloAck(*struct.unpack("<II", payload))
    if mtype == MSG_EVAL_JOB:
        _need(payload, 20 + HASH_LEN, "EvalJob")
        gen, idx, seed = struct.unpack("<QIQ", payload[:20])
        return EvalJob(gen, idx, seed, payload[20:])
    if mtype == MSG_REWARD_REPORT:
        _need(payload, 32, "RewardReport")
        return RewardReport(*struct.unpack("<QIdQI", payload))
    if mtype == MSG_SHUTDOWN:
        _need(payload, 0, "Shutdown")
        return Shutdown()
    if mtype == MSG_JOB_ERROR:
        if len(payload) < 18:
            raise FrameCorrupt(f"JobError: payload too short ({len(payload)} bytes)")
        gen, idx, code, tlen = struct.unpack("<QIIH", payload[:18])
        if len(payload) != 18 + tlen:
            raise FrameCorrupt("JobError: message length disagrees with payload")
        return JobError(gen, idx, code, payload[18:].decode(errors="replace"))
    raise FrameCorrupt(f"unknown message type {mtype}")


class FrameDecoder:
    """Incremental decoder; feed byte chunks, get complete messages back."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        while len(self._buf) >= 4:
            length = struct.unpack_from("<I", self._buf)[0]
            if length < 5 or length > _MAX_FRAME:
                raise FrameCorrupt(f"bad frame length {length}")
            if len(self._buf) < 4 + length:
                break
            mtype = self._buf[4]
            crc = struct.unpack_from("<I", self._buf, 5)[0]
            payload = bytes(self._buf[9:4 + length])
            if zlib.crc32(payload) & 0xFFFFFFFF != crc:
                raise FrameCorrupt(f"crc mismatch on message type {mtype}")
            del self._buf[:4 + length]
            out.append(_decode_payload(mtype, payload))
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


def decode_one(data: bytes) -> Message:
    """Decode exactly one complete frame (for tests and simple callers)."""
    dec = FrameDecoder()
    msgs = dec.feed(data)
    if len(msgs) != 1 or dec.pending_bytes:
        raise FrameCorrupt(f"expected exactly one frame, got {len(msgs)} "
                           f"with {dec.pending_bytes} bytes left over")
    return msgs[0]
