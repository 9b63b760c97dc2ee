"""Binary wire format: fixed 17-byte frame header plus per-verb payload codecs.

All scalars are little-endian.  Arrays are length-prefixed (u32 count) unless
their length follows from an earlier field.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from ..errors import ProtocolError

MAGIC = b"HFN1"
HEADER = struct.Struct("<4sIQB")
HEADER_SIZE = HEADER.size  # 17
MAX_PAYLOAD = 0xFFFFFFFF
FULL_FANOUT = 0xFFFFFFFF  # wire sentinel: take every in-neighbor

STATUS_OK = 0
STATUS_ERROR = 1


class Verb(IntEnum):
    SAMPLE_NEIGHBORS = 1
    PULL_DATA = 2
    PUSH_DATA = 3
    BARRIER = 4
    ALLREDUCE = 5
    SHUTDOWN = 6


_VERBS = {v.value: v for v in Verb}


def parse_verb(code: int) -> Verb:
    try:
        return _VERBS[code]
    except KeyError:
        raise ProtocolError(f"unknown verb {code}") from None


@dataclass
class Frame:
    request_id: int
    verb: Verb
    payload: bytes = b""

    def encode(self) -> bytes:
        return encode_frame(self.request_id, self.verb, self.payload)


def encode_frame(request_id: int, verb: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds the u32 length field")
    return HEADER.pack(MAGIC, len(payload), request_id, int(verb)) + payload


def decode_header(buf: bytes) -> tuple[int, int, Verb]:
    """-> (payload length, request id, verb)."""
    if len(buf) != HEADER_SIZE:
        raise ProtocolError(f"short frame header ({len(buf)} bytes)")
    magic, length, rid, verb = HEADER.unpack(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    return length, rid, parse_verb(verb)


def decode_frame(buf: bytes) -> Frame:
    length, rid, verb = decode_header(buf[:HEADER_SIZE])
    payload = buf[HEADER_SIZE:]
    if len(payload) != length:
        raise ProtocolError(f"payload length field says {length}, got {len(payload)}")
    return Frame(rid, verb, bytes(payload))


# -- low-level readers/writers ------------------------------------------------------


_STRUCTS: dict = {}


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise ProtocolError(f"payload truncated: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def scalar(self, fmt: str):
        s = _STRUCTS.get(fmt) or _STRUCTS.setdefault(fmt, struct.Struct("<" + fmt))
        return s.unpack(self.take(s.size))[0]

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def string(self) -> str:
        n = self.scalar("H")
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"invalid utf-8 string: {exc}") from None

    def done(self):
        if self.pos != len(self.buf):
            raise ProtocolError(f"{len(self.buf) - self.pos} trailing payload bytes")


def _expect(buf, n: int) -> None:
    """Fixed-layout payloads must be exactly n bytes long."""
    if len(buf) < n:
        raise ProtocolError(f"payload truncated: need {n} bytes, have {len(buf)}")
    if len(buf) > n:
        raise ProtocolError(f"{len(buf) - n} trailing payload bytes")


def _head(buf, st: struct.Struct, at: int = 0):
    if len(buf) < at + st.size:
        raise ProtocolError(f"payload truncated: need {at + st.size} bytes, have {len(buf)}")
    return st.unpack_from(buf, at)


_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U32X2 = struct.Struct("<II")
_SAMPLE_HEAD = struct.Struct("<BII")
_KEY = struct.Struct("<QQ")


def _string(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ProtocolError("string field longer than 65535 bytes")
    return struct.pack("<H", len(b)) + b


def _u64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<u8").tobytes()


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


# -- verb payloads ------------------------------------------------------------------


@dataclass
class SampleRequest:
    layer: int
    fanout: int  # FULL_FANOUT for all neighbors
    seeds: np.ndarray  # u64 global vertex IDs
    key: tuple  # (epoch_seed, seq_no) as u64 pair

    def encode(self) -> bytes:
        seeds = np.asarray(self.seeds, dtype="<u8")
        return (
            struct.pack("<BII", self.layer, self.fanout, len(seeds))
            + _u64(seeds)
            + struct.pack("<QQ", int(self.key[0]), int(self.key[1]))
        )

    @classmethod
    def decode(cls, buf: bytes) -> "SampleRequest":
        layer, fanout, n = _head(buf, _SAMPLE_HEAD)
        _expect(buf, 9 + 8 * n + 16)
        seeds = np.frombuffer(buf, "<u8", n, 9).copy()
        return cls(layer, fanout, seeds, _KEY.unpack_from(buf, 9 + 8 * n))


@dataclass
class SampleResponse:
    """Sampled in-edges as (src, dst, edge id) triples, grouped per seed in request order."""

    src: np.ndarray
    dst: np.ndarray
    eid: np.ndarray

    def encode(self) -> bytes:
        tri = np.stack([np.asarray(self.src), np.asarray(self.dst), np.asarray(self.eid)], axis=1)
        return struct.pack("<I", len(tri)) + _u64(tri)

    @classmethod
    def decode(cls, buf: bytes) -> "SampleResponse":
        (m,) = _head(buf, _U32)
        _expect(buf, 4 + 24 * m)
        tri = np.frombuffer(buf, "<u8", 3 * m, 4).reshape(m, 3).astype(np.int64)
        return cls(tri[:, 0].copy(), tri[:, 1].copy(), tri[:, 2].copy())


@dataclass
class PullRequest:
    space: str
    ids: np.ndarray  # type-local IDs

    def encode(self) -> bytes:
        ids = np.asarray(self.ids, dtype="<u8")
        return _string(self.space) + struct.pack("<I", len(ids)) + _u64(ids)

    @classmethod
    def decode(cls, buf: bytes) -> "PullRequest":
        (k,) = _head(buf, _U16)
        (n,) = _head(buf, _U32, 2 + k)
        _expect(buf, 2 + k + 4 + 8 * n)
        try:
            space = bytes(buf[2 : 2 + k]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"invalid utf-8 string: {exc}") from None
        return cls(space, np.frombuffer(buf, "<u8", n, 6 + k).astype(np.int64))


@dataclass
class PullResponse:
    rows: np.ndarray  # (n, width) f32

    def encode(self) -> bytes:
        n, w = self.rows.shape
        return struct.pack("<II", n, w) + _f32(self.rows)

    @classmethod
    def decode(cls, buf: bytes) -> "PullResponse":
        n, w = _head(buf, _U32X2)
        _expect(buf, 8 + 4 * n * w)
        return cls(np.frombuffer(buf, "<f4", n * w, 8).reshape(n, w).copy())


@dataclass
class PushRequest:
    space: str
    ids: np.ndarray
    rows: np.ndarray

    def encode(self) -> bytes:
        ids = np.asarray(self.ids, dtype="<u8")
        rows = np.asarray(self.rows, dtype="<f4")
        if rows.ndim != 2 or rows.shape[0] != len(ids):
            raise ProtocolError("push rows must be 2-D with one row per id")
        return _string(self.space) + struct.pack("<II", len(ids), rows.shape[1]) + _u64(ids) + _f32(rows)

    @classmethod
    def decode(cls, buf: bytes) -> "PushRequest":
        r = _Reader(buf)
        space = r.string()
        n, w = r.scalar("I"), r.scalar("I")
        ids = r.array("<u8", n).astype(np.int64)
        rows = r.array("<f4", n * w).reshape(n, w)
        r.done()
        return cls(space, ids, rows)


@dataclass
class CollectiveRequest:
    """BARRIER carries no values; ALLREDUCE carries one f32 vector."""

    group: str
    round: int
    rank: int
    size: int
    values: np.ndarray | None = None

    def encode(self) -> bytes:
        head = _string(self.group) + struct.pack("<QII", self.round, self.rank, self.size)
        if self.values is None:
            return head + struct.pack("<B", 0)
        v = np.asarray(self.values, dtype="<f4").ravel()
        return head + struct.pack("<BI", 1, len(v)) + _f32(v)

    @classmethod
    def decode(cls, buf: bytes) -> "CollectiveRequest":
        r = _Reader(buf)
        group = r.string()
        rnd, rank, size = r.scalar("Q"), r.scalar("I"), r.scalar("I")
        has = r.scalar("B")
        if has not in (0, 1):
            raise ProtocolError(f"bad values flag {has}")
        values = r.array("<f4", r.scalar("I")) if has else None
        r.done()
        return cls(group, rnd, rank, size, values)


@dataclass
class VectorResponse:
    values: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))

    def encode(self) -> bytes:
        v = np.asarray(self.values, dtype="<f4").ravel()
        return struct.pack("<I", len(v)) + _f32(v)

    @classmethod
    def decode(cls, buf: bytes) -> "VectorResponse":
        r = _Reader(buf)
        v = r.array("<f4", r.scalar("I"))
        r.done()
        return cls(v)


@dataclass
class Empty:
    def encode(self) -> bytes:
        return b""

    @classmethod
    def decode(cls, buf: bytes) -> "Empty":
        _Reader(buf).done()
        return cls()


REQUEST_TYPES = {
    Verb.SAMPLE_NEIGHBORS: SampleRequest,
    Verb.PULL_DATA: PullRequest,
    Verb.PUSH_DATA: PushRequest,
    Verb.BARRIER: CollectiveRequest,
    Verb.ALLREDUCE: CollectiveRequest,
    Verb.SHUTDOWN: Empty,
}

RESPONSE_TYPES = {
    Verb.SAMPLE_NEIGHBORS: SampleResponse,
    Verb.PULL_DATA: PullResponse,
    Verb.PUSH_DATA: Empty,
    Verb.BARRIER: Empty,
    Verb.ALLREDUCE: VectorResponse,
    Verb.SHUTDOWN: Empty,
}


def decode_request(verb: Verb, payload: bytes):
    return REQUEST_TYPES[parse_verb(verb)].decode(payload)


def ok_payload(body: bytes) -> bytes:
    return bytes([STATUS_OK]) + body


def error_payload(message: str) -> bytes:
    return bytes([STATUS_ERROR]) + message.encode("utf-8", "replace")


def split_status(payload: bytes) -> tuple[int, bytes]:
    if not payload:
        raise ProtocolError("response without status byte")
    status = payload[0]
    if status not in (STATUS_OK, STATUS_ERROR):
        raise ProtocolError(f"bad response status {status}")
    return status, payload[1:]
