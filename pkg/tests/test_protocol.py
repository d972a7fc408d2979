import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splitlearn import protocol
from splitlearn.chain import Task, build_chain, mini_conv_chain
from splitlearn.protocol import (
    HEADER_SIZE,
    MAGIC,
    RECEIVED,
    SENT,
    Ack,
    ActivationFwd,
    ByteCounter,
    ClientStateSnapshot,
    ErrorCode,
    FrameDecoder,
    NeedMore,
    ProtocolError,
    SnapshotUpload,
    Tag,
    account,
    apply_snapshot,
    decode,
    decode_one,
    encode,
    encode_tensor,
    take_snapshot,
)

from oracles import random_message, snapshot_bytes, tensor_bytes


def test_ack_layout():
    frame = encode(Ack(7))
    assert len(frame) == 4 + 1 + 1 + 4 + 4
    assert frame[:4] == b"SPLT" and frame[4] == 1 and frame[5] == Tag.ACK
    assert struct.unpack_from("<I", frame, 6)[0] == 4
    assert struct.unpack_from("<I", frame, 10)[0] == 7


def test_zero_tensor_payload_size():
    assert len(encode_tensor(np.zeros((2, 2)))) == 1 + 8 + 16
    frame = encode(ActivationFwd(1, 2, np.zeros((2, 2), dtype=np.float32)))
    assert struct.unpack_from("<I", frame, 6)[0] == 8 + 25


def test_tensor_values_little_endian():
    blob = encode_tensor(np.array([1.0, -2.5], dtype=np.float32))
    assert blob == b"\x01" + struct.pack("<I", 2) + struct.pack("<2f", 1.0, -2.5)


def test_roundtrip_fuzz():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        msg = random_message(rng)
        assert decode(encode(msg)) == msg


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
       st.lists(st.floats(width=32, allow_nan=False), max_size=30))
def test_activation_roundtrip_property(session, batch, values):
    msg = ActivationFwd(session, batch, np.array(values, dtype=np.float32))
    assert decode(encode(msg)) == msg


def test_bad_magic():
    with pytest.raises(ProtocolError) as e:
        decode(b"XXXX" + encode(Ack(1))[4:])
    assert e.value.code is ErrorCode.BAD_MAGIC


def test_truncated_needs_more_without_consuming():
    frame = encode(ActivationFwd(1, 1, np.ones((3, 3), dtype=np.float32)))
    dec = FrameDecoder()
    assert dec.feed(frame[:20]) == []
    assert dec.pending == 20
    with pytest.raises(NeedMore) as e:
        decode(frame[:20])
    assert e.value.code is ErrorCode.NEED_MORE
    assert dec.feed(frame[20:]) == [decode(frame)]
    assert dec.pending == 0


def test_unsupported_version():
    frame = bytearray(encode(Ack(1)))
    frame[4] = 2
    with pytest.raises(ProtocolError) as e:
        decode(bytes(frame))
    assert e.value.code is ErrorCode.UNSUPPORTED_VERSION


def test_unknown_tag():
    frame = bytearray(encode(Ack(1)))
    frame[5] = 99
    with pytest.raises(ProtocolError) as e:
        decode(bytes(frame))
    assert e.value.code is ErrorCode.UNKNOWN_TAG


def test_malformed_payloads():
    # length field claims fewer bytes than the message needs
    short = MAGIC + struct.pack("<BBI", 1, Tag.ACK, 2) + b"\x00\x00"
    # trailing payload bytes
    long = MAGIC + struct.pack("<BBI", 1, Tag.ACK, 5) + b"\x00" * 5
    # bytes after a complete frame
    extra = encode(Ack(1)) + b"\x00"
    bad_utf8 = MAGIC + struct.pack("<BBI", 1, Tag.PROTOCOL_ERROR, 3) + b"\x01\x00\xff"
    for blob in (short, long, extra, bad_utf8):
        with pytest.raises(ProtocolError) as e:
            decode(blob)
        assert e.value.code is ErrorCode.MALFORMED


def test_tensor_too_large(monkeypatch):
    monkeypatch.setattr(protocol, "MAX_TENSOR_BYTES", 64)
    with pytest.raises(ProtocolError) as e:
        encode(ActivationFwd(0, 0, np.zeros(17, dtype=np.float32)))
    assert e.value.code is ErrorCode.TENSOR_TOO_LARGE
    encode(ActivationFwd(0, 0, np.zeros(16, dtype=np.float32)))


def _chain(seed=0):
    return build_chain(mini_conv_chain(), np.random.default_rng(seed))


def test_snapshot_crc_flip_detected():
    front, _, back = _chain()
    frame = bytearray(encode(SnapshotUpload(0, take_snapshot(front, back, 0, 3))))
    rng = np.random.default_rng(1)
    for _ in range(50):
        pos = int(rng.integers(HEADER_SIZE + 4, len(frame)))
        bit = 1 << int(rng.integers(8))
        frame[pos] ^= bit
        with pytest.raises(ProtocolError) as e:
            decode(bytes(frame))
        assert e.value.code is ErrorCode.CORRUPT_SNAPSHOT
        frame[pos] ^= bit
    decode(bytes(frame))


def test_snapshot_is_deep_copy_and_restores():
    front, _, back = _chain(0)
    for link in (front, back):
        for p, s in zip(link.params, link.adam_states):
            s.t = 17
            s.m[...] = 0.25
    snap = take_snapshot(front, back, 4, 2)
    before = [p.data.copy() for p in front.params + back.params]
    for p in front.params + back.params:
        p.data += 1.0
    assert all(np.array_equal(s.value, b) for s, b in zip(snap.front + snap.back, before))
    fresh_front, _, fresh_back = _chain(99)
    apply_snapshot(ClientStateSnapshot.decode(snap.encode()), fresh_front, fresh_back)
    assert all(np.array_equal(p.data, b) for p, b in zip(fresh_front.params + fresh_back.params, before))
    assert all(s.t == 17 and np.all(s.m == 0.25) for s in fresh_front.adam_states + fresh_back.adam_states)
    assert take_snapshot(fresh_front, fresh_back, 4, 2) == snap


def test_snapshot_shape_mismatch():
    front, _, back = _chain()
    snap = take_snapshot(front, back, 0, 0)
    other = build_chain(mini_conv_chain(Task.MULTILABEL), np.random.default_rng(0))
    with pytest.raises(ProtocolError) as e:
        apply_snapshot(snap, other[0], other[2])
    assert e.value.code is ErrorCode.SNAPSHOT_SHAPE_MISMATCH


def test_snapshot_size_formula():
    front, _, back = _chain()
    blob = take_snapshot(front, back, 0, 0).encode()
    assert len(blob) == snapshot_bytes([(8, 1, 3, 3), (8,)], [(32, 1), (1,)])
    assert zlib.crc32(blob[:-4]) == struct.unpack("<I", blob[-4:])[0]


def test_prefix_of_stream_never_yields_garbage():
    rng = np.random.default_rng(3)
    msgs = [random_message(rng) for _ in range(40)]
    stream = b"".join(encode(m) for m in msgs)
    for cut in rng.integers(0, len(stream), size=60):
        got = FrameDecoder().feed(stream[:cut])
        assert got == msgs[:len(got)]
        consumed = sum(len(encode(m)) for m in got)
        if consumed < cut:
            with pytest.raises(NeedMore):
                decode_one(stream[consumed:cut])


def test_byte_counter_accounting():
    c = ByteCounter()
    assert c.total() == 0 and c.as_dict() == {}
    msg = ActivationFwd(0, 0, np.zeros((2, 3), dtype=np.float32))
    account(c, msg, SENT)
    account(c, msg, RECEIVED)
    assert c.total(SENT, Tag.ACTIVATION_FWD) == HEADER_SIZE + 8 + tensor_bytes(2, 3)
    assert c.total() == 2 * len(encode(msg)) and c.count() == 2
    earlier = c.snapshot()
    account(c, Ack(1), SENT)
    assert c.delta(earlier).total() == len(encode(Ack(1)))
    with pytest.raises(ValueError):
        account(c, msg, "sideways")
