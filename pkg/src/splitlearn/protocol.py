"""Binary wire protocol for the client/server boundary.

Frame layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"SPLT"
    4       1     version (=1)
    5       1     tag (see Tag)
    6       4     payload length in bytes (u32)
    10      n     payload

Tensor encoding: u8 rank, rank x u32 dims, then prod(dims) float32 values.
Payloads per tag are documented on the message classes below and in
PROTOCOL.md.
"""
from __future__ import annotations

import enum
import struct
import zlib
from collections import defaultdict
from dataclasses import dataclass, field, fields

import numpy as np

from .tensor_core import AdamState

MAGIC = b"SPLT"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
HEADER_SIZE = HEADER.size  # 10
MAX_TENSOR_BYTES = 2**31 - 1

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F32 = np.dtype("<f4")


class ErrorCode(enum.IntEnum):
    BAD_MAGIC = 1
    NEED_MORE = 2
    UNSUPPORTED_VERSION = 3
    CORRUPT_SNAPSHOT = 4
    SNAPSHOT_SHAPE_MISMATCH = 5
    UNKNOWN_TAG = 6
    MALFORMED = 7
    TENSOR_TOO_LARGE = 8
    CONNECTION_LOST = 9
    OUT_OF_ORDER = 10


class ProtocolError(Exception):
    def __init__(self, code: ErrorCode, message: str = ""):
        super().__init__(f"{code.name}: {message}" if message else code.name)
        self.code = code
        self.message = message


class NeedMore(ProtocolError):
    def __init__(self, message: str = ""):
        super().__init__(ErrorCode.NEED_MORE, message)


class Tag(enum.IntEnum):
    ACTIVATION_FWD = 1
    GRADIENT_BWD = 2
    SNAPSHOT_UPLOAD = 3
    SNAPSHOT_DOWNLOAD = 4
    BEGIN_EPOCH = 5
    END_EPOCH = 6
    ACK = 7
    PROTOCOL_ERROR = 8


def _same(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return (isinstance(a, np.ndarray) and isinstance(b, np.ndarray) and a.shape == b.shape
                and a.astype(_F32).tobytes() == b.astype(_F32).tobytes())
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a == b


class _BitwiseEq:
    """Field-wise equality where arrays compare by shape and raw float32 bytes."""

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return all(_same(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))

    __hash__ = None


# --------------------------------------------------------------------------
# snapshot


@dataclass(eq=False)
class ParamState(_BitwiseEq):
    value: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int


@dataclass(eq=False)
class ClientStateSnapshot(_BitwiseEq):
    """Front and back link state of one client, copied to the next on rotation.

    Payload: u32 client_id, u32 epoch, then for front and back a u32 count
    followed by (value tensor, m tensor, v tensor, u64 step) per parameter,
    and finally the CRC-32 of everything before it.
    """

    client_id: int
    epoch: int
    front: list[ParamState]
    back: list[ParamState]

    def encode(self) -> bytes:
        parts = [_U32.pack(self.client_id), _U32.pack(self.epoch)]
        for link in (self.front, self.back):
            parts.append(_U32.pack(len(link)))
            for ps in link:
                parts += [encode_tensor(ps.value), encode_tensor(ps.m), encode_tensor(ps.v), _U64.pack(ps.t)]
        body = b"".join(parts)
        return body + _U32.pack(zlib.crc32(body))

    @property
    def checksum(self) -> int:
        return _U32.unpack(self.encode()[-4:])[0]

    @classmethod
    def decode(cls, blob: bytes) -> "ClientStateSnapshot":
        if len(blob) < 16:
            raise ProtocolError(ErrorCode.MALFORMED, "snapshot shorter than its fixed fields")
        body, (crc,) = blob[:-4], _U32.unpack(blob[-4:])
        if zlib.crc32(body) != crc:
            raise ProtocolError(ErrorCode.CORRUPT_SNAPSHOT, "CRC-32 mismatch")
        r = _Reader(body)
        client_id, epoch = r.u32(), r.u32()
        links = []
        for _ in range(2):
            link = []
            for _ in range(r.u32()):
                link.append(ParamState(r.tensor(), r.tensor(), r.tensor(), r.u64()))
            links.append(link)
        r.done()
        return cls(client_id, epoch, links[0], links[1])


def _link_state(link) -> list[ParamState]:
    return [ParamState(p.data.copy(), s.m.copy(), s.v.copy(), s.t) for p, s in zip(link.params, link.adam_states)]


def take_snapshot(front, back, client_id: int, epoch: int) -> ClientStateSnapshot:
    return ClientStateSnapshot(client_id, epoch, _link_state(front), _link_state(back))


def apply_snapshot(snapshot: ClientStateSnapshot, front, back) -> None:
    """Overwrite front/back parameters, Adam moments and step counters in place."""
    for name, link, states in (("front", front, snapshot.front), ("back", back, snapshot.back)):
        params = link.params
        if len(params) != len(states) or any(p.shape != s.value.shape for p, s in zip(params, states)):
            raise ProtocolError(ErrorCode.SNAPSHOT_SHAPE_MISMATCH,
                                f"{name}: snapshot shapes {[s.value.shape for s in states]} "
                                f"vs link {[p.shape for p in params]}")
    for link, states in ((front, snapshot.front), (back, snapshot.back)):
        for p, adam, ps in zip(link.params, link.adam_states, states):
            p.data[...] = ps.value
            p.grad = None
            adam.m[...] = ps.m
            adam.v[...] = ps.v
            adam.t = int(ps.t)


# --------------------------------------------------------------------------
# messages


@dataclass(eq=False)
class ActivationFwd(_BitwiseEq):
    """Payload: u32 session_id, u32 batch_id, tensor."""

    session_id: int
    batch_id: int
    tensor: np.ndarray
    tag = Tag.ACTIVATION_FWD


@dataclass(eq=False)
class GradientBwd(_BitwiseEq):
    """Payload: u32 session_id, u32 batch_id, tensor."""

    session_id: int
    batch_id: int
    tensor: np.ndarray
    tag = Tag.GRADIENT_BWD


@dataclass(eq=False)
class SnapshotUpload(_BitwiseEq):
    """Payload: u32 client_id, snapshot blob."""

    client_id: int
    snapshot: ClientStateSnapshot
    tag = Tag.SNAPSHOT_UPLOAD


@dataclass(eq=False)
class SnapshotDownload(_BitwiseEq):
    """Payload: u32 client_id."""

    client_id: int
    tag = Tag.SNAPSHOT_DOWNLOAD


@dataclass(eq=False)
class BeginEpoch(_BitwiseEq):
    """Payload: u32 client_id, u32 epoch."""

    client_id: int
    epoch: int
    tag = Tag.BEGIN_EPOCH


@dataclass(eq=False)
class EndEpoch(_BitwiseEq):
    """Payload: u32 client_id, u32 epoch."""

    client_id: int
    epoch: int
    tag = Tag.END_EPOCH


@dataclass(eq=False)
class Ack(_BitwiseEq):
    """Payload: u32 ref."""

    ref: int
    tag = Tag.ACK


@dataclass(eq=False)
class ErrorFrame(_BitwiseEq):
    """Payload: u16 code, UTF-8 message (remainder of the payload)."""

    code: int
    message: str = ""
    tag = Tag.PROTOCOL_ERROR


WireMessage = ActivationFwd | GradientBwd | SnapshotUpload | SnapshotDownload | BeginEpoch | EndEpoch | Ack | ErrorFrame

MESSAGE_TYPES = {cls.tag: cls for cls in
                 (ActivationFwd, GradientBwd, SnapshotUpload, SnapshotDownload, BeginEpoch, EndEpoch, Ack, ErrorFrame)}


def encode_tensor(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim > 255:
        raise ProtocolError(ErrorCode.MALFORMED, f"rank {x.ndim} exceeds 255")
    nbytes = 4 * x.size
    if nbytes > MAX_TENSOR_BYTES:
        raise ProtocolError(ErrorCode.TENSOR_TOO_LARGE, f"{nbytes} bytes of tensor data")
    return (_U8.pack(x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
            + np.ascontiguousarray(x, dtype=_F32).tobytes())


def tensor_nbytes(shape) -> int:
    return 1 + 4 * len(shape) + 4 * int(np.prod(shape, dtype=np.int64))


class _Reader:
    def __init__(self, buf: bytes | memoryview):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise ProtocolError(ErrorCode.MALFORMED, "payload ends inside a field")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return _U8.unpack(self.take(1))[0]

    def u16(self):
        return _U16.unpack(self.take(2))[0]

    def u32(self):
        return _U32.unpack(self.take(4))[0]

    def u64(self):
        return _U64.unpack(self.take(8))[0]

    def tensor(self) -> np.ndarray:
        rank = self.u8()
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(4 * n), dtype=_F32).astype(np.float32).reshape(shape)

    def rest(self) -> bytes:
        out = bytes(self.buf[self.pos:])
        self.pos = len(self.buf)
        return out

    def done(self):
        if self.pos != len(self.buf):
            raise ProtocolError(ErrorCode.MALFORMED, f"{len(self.buf) - self.pos} trailing payload bytes")


def _encode_payload(msg) -> bytes:
    match msg:
        case ActivationFwd() | GradientBwd():
            return _U32.pack(msg.session_id) + _U32.pack(msg.batch_id) + encode_tensor(msg.tensor)
        case SnapshotUpload():
            return _U32.pack(msg.client_id) + msg.snapshot.encode()
        case SnapshotDownload():
            return _U32.pack(msg.client_id)
        case BeginEpoch() | EndEpoch():
            return _U32.pack(msg.client_id) + _U32.pack(msg.epoch)
        case Ack():
            return _U32.pack(msg.ref)
        case ErrorFrame():
            return _U16.pack(int(msg.code)) + msg.message.encode("utf-8")
    raise TypeError(f"not a wire message: {msg!r}")


def encode(msg) -> bytes:
    payload = _encode_payload(msg)
    if len(payload) > 0xFFFFFFFF:
        raise ProtocolError(ErrorCode.TENSOR_TOO_LARGE, "payload does not fit a u32 length")
    return HEADER.pack(MAGIC, VERSION, int(msg.tag), len(payload)) + payload


def _decode_payload(tag: int, payload) -> object:
    r = _Reader(payload)
    match tag:
        case Tag.ACTIVATION_FWD | Tag.GRADIENT_BWD:
            msg = MESSAGE_TYPES[tag](r.u32(), r.u32(), r.tensor())
        case Tag.SNAPSHOT_UPLOAD:
            client_id = r.u32()
            msg = SnapshotUpload(client_id, ClientStateSnapshot.decode(r.rest()))
        case Tag.SNAPSHOT_DOWNLOAD:
            msg = SnapshotDownload(r.u32())
        case Tag.BEGIN_EPOCH | Tag.END_EPOCH:
            msg = MESSAGE_TYPES[tag](r.u32(), r.u32())
        case Tag.ACK:
            msg = Ack(r.u32())
        case Tag.PROTOCOL_ERROR:
            code = r.u16()
            try:
                text = r.rest().decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ProtocolError(ErrorCode.MALFORMED, "error message is not UTF-8") from exc
            msg = ErrorFrame(code, text)
        case _:
            raise ProtocolError(ErrorCode.UNKNOWN_TAG, f"tag {tag}")
    r.done()
    return msg


def peek_frame_length(buf) -> int:
    """Total size of the frame at the start of ``buf``; raises on a bad header or short input."""
    if len(buf) >= 4 and bytes(buf[:4]) != MAGIC:
        raise ProtocolError(ErrorCode.BAD_MAGIC, f"got {bytes(buf[:4])!r}")
    if len(buf) < 4 and bytes(buf) != MAGIC[:len(buf)]:
        raise ProtocolError(ErrorCode.BAD_MAGIC, f"got {bytes(buf)!r}")
    if len(buf) < HEADER_SIZE:
        raise NeedMore(f"have {len(buf)} of {HEADER_SIZE} header bytes")
    _, version, _, length = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise ProtocolError(ErrorCode.UNSUPPORTED_VERSION, f"version {version}")
    return HEADER_SIZE + length


def decode_one(buf) -> tuple[object, int]:
    """Decode the frame at the start of ``buf``; returns (message, bytes consumed)."""
    total = peek_frame_length(buf)
    if len(buf) < total:
        raise NeedMore(f"have {len(buf)} of {total} frame bytes")
    tag = buf[5]
    return _decode_payload(tag, memoryview(buf)[HEADER_SIZE:total]), total


def decode(data: bytes):
    """Decode exactly one complete frame."""
    msg, used = decode_one(data)
    if used != len(data):
        raise ProtocolError(ErrorCode.MALFORMED, f"{len(data) - used} bytes after the frame")
    return msg


class FrameDecoder:
    """Incremental stream decoder: feed bytes, collect whole messages.

    A partial trailing frame stays buffered (nothing is consumed) until the
    rest of it arrives.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf += data
        out = []
        while True:
            try:
                msg, used = decode_one(self._buf)
            except NeedMore:
                return out
            del self._buf[:used]
            out.append(msg)

    @property
    def pending(self) -> int:
        return len(self._buf)


def frame_size(msg) -> int:
    return len(encode(msg))


# --------------------------------------------------------------------------
# byte accounting


SENT, RECEIVED = "sent", "received"


@dataclass
class ByteCounter:
    """Cumulative bytes and frame counts per (direction, message kind)."""

    bytes: dict = field(default_factory=lambda: defaultdict(int))
    frames: dict = field(default_factory=lambda: defaultdict(int))

    def total(self, direction: str | None = None, kind: Tag | None = None) -> int:
        return sum(v for (d, k), v in self.bytes.items()
                   if (direction is None or d == direction) and (kind is None or k == kind))

    def count(self, direction: str | None = None, kind: Tag | None = None) -> int:
        return sum(v for (d, k), v in self.frames.items()
                   if (direction is None or d == direction) and (kind is None or k == kind))

    def snapshot(self) -> "ByteCounter":
        return ByteCounter(defaultdict(int, self.bytes), defaultdict(int, self.frames))

    def delta(self, earlier: "ByteCounter") -> "ByteCounter":
        keys = set(self.bytes) | set(self.frames)
        return ByteCounter(
            defaultdict(int, {k: self.bytes[k] - earlier.bytes.get(k, 0) for k in keys}),
            defaultdict(int, {k: self.frames[k] - earlier.frames.get(k, 0) for k in keys}),
        )

    def as_dict(self) -> dict[str, int]:
        return {f"{d}:{Tag(k).name.lower()}": v for (d, k), v in sorted(self.bytes.items()) if v}


def account(counter: ByteCounter, msg_or_tag, direction: str, nbytes: int | None = None) -> None:
    """Add one frame to ``counter``; the size is computed by encoding if not given."""
    if direction not in (SENT, RECEIVED):
        raise ValueError(f"direction must be {SENT!r} or {RECEIVED!r}")
    tag = Tag(msg_or_tag) if isinstance(msg_or_tag, int) else msg_or_tag.tag
    if nbytes is None:
        nbytes = frame_size(msg_or_tag)
    counter.bytes[(direction, tag)] += nbytes
    counter.frames[(direction, tag)] += 1
