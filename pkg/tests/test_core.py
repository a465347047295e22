import hashlib
import os
import random
import struct
import subprocess
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtee.core import (MESSAGES, Frame, FrameError, InvokeReq, LengthMismatch, MalformedUuid,
                       MemrefIn, MemrefInOut, MemrefOut, MsgType, NoneParam, Operation,
                       OpenSessionReq, ReturnCode, TaManifest, TruncatedFrame, UnknownMsgType,
                       Uuid, ValueIn, ValueInOut, ValueOut, code_name, compute_digest,
                       decode_frame, decode_message, encode_frame, format_uuid, parse_kv,
                       parse_uuid, read_frame)

word = st.integers(0, 0xFFFFFFFF)
blob = st.binary(max_size=64)
param = st.one_of(
    st.just(NoneParam()),
    st.builds(ValueIn, word, word),
    st.builds(ValueOut, word, word),
    st.builds(ValueInOut, word, word),
    st.builds(MemrefIn, blob),
    blob.flatmap(lambda d: st.integers(len(d), len(d) + 64).map(lambda c: MemrefOut(c, d))),
    blob.flatmap(lambda d: st.integers(len(d), len(d) + 64).map(lambda c: MemrefInOut(d, c))),
)
operation = st.lists(param, min_size=4, max_size=4).map(lambda ps: Operation(tuple(ps)))
uuids = st.binary(min_size=16, max_size=16).map(Uuid)


def test_uuid_zero_and_saturated():
    assert parse_uuid("00000000-0000-0000-0000-000000000000").bytes == bytes(16)
    assert parse_uuid("ffffffff-ffff-ffff-ffff-ffffffffffff").bytes == b"\xff" * 16
    assert format_uuid(Uuid(bytes(16))) == "00000000-0000-0000-0000-000000000000"


def test_uuid_round_trip_random():
    rng = random.Random(1)
    for _ in range(1000):
        u = Uuid(rng.randbytes(16))
        text = format_uuid(u)
        assert len(text) == 36
        assert parse_uuid(text) == u


@pytest.mark.parametrize("bad", [
    "", "0" * 36, "00000000-0000-0000-0000-00000000000",
    "00000000-0000-0000-0000-00000000000g", "00000000_0000-0000-0000-000000000000",
    "000000000-000-0000-0000-000000000000",
])
def test_uuid_rejects_malformed(bad):
    with pytest.raises(MalformedUuid):
        parse_uuid(bad)


def test_uuid_format_is_lowercase():
    assert format_uuid(parse_uuid("ABCDEF00-0000-0000-0000-0000000000AA")) == \
        "abcdef00-0000-0000-0000-0000000000aa"


def test_digest_of_empty_image():
    assert compute_digest(b"").hex() == \
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def test_digest_detects_flipped_bytes():
    rng = random.Random(2)
    image = rng.randbytes(512)
    base = compute_digest(image)
    assert compute_digest(image) == base
    for _ in range(100):
        i = rng.randrange(len(image))
        flipped = bytearray(image)
        flipped[i] ^= 1 << rng.randrange(8)
        assert compute_digest(bytes(flipped)) != base


def test_digest_matches_independent_hash():
    for n in (0, 1, 55, 56, 64, 1000):
        data = os.urandom(n)
        assert compute_digest(data) == hashlib.new("sha256", data).digest()


def test_minimal_frame_bytes():
    assert encode_frame(Frame(0x01, b"")) == bytes([0x01, 0, 0, 0, 0x01])


def test_short_buffer_is_truncated():
    with pytest.raises(TruncatedFrame):
        decode_frame(b"\x01\x00\x00")


def test_length_field_must_match_buffer():
    raw = encode_frame(Frame(0x03, b"abc"))
    with pytest.raises(LengthMismatch):
        decode_frame(raw + b"x")
    with pytest.raises(FrameError):
        decode_frame(raw[:-1])


def test_unknown_msg_type_preserved_but_flagged():
    f = decode_frame(encode_frame(Frame(0x7E, b"zz")))
    assert f.msg_type == 0x7E and f.payload == b"zz" and not f.known
    with pytest.raises(UnknownMsgType):
        decode_frame(encode_frame(Frame(0x7E, b"zz")), strict=True)


def test_frame_round_trip_random():
    rng = random.Random(3)
    for _ in range(1000):
        f = Frame(rng.randrange(256), rng.randbytes(rng.randrange(300)))
        assert decode_frame(encode_frame(f)) == f


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 65536))
def test_frame_round_trip_large_payloads(n):
    f = Frame(0x12, bytes([n & 0xFF]) * n)
    raw = encode_frame(f)
    assert struct.unpack_from("<I", raw)[0] == n + 1
    assert decode_frame(raw) == f


def test_message_type_table():
    expected = {
        0x01: "OpenSessionReq", 0x02: "OpenSessionResp", 0x03: "InvokeReq",
        0x04: "InvokeResp", 0x05: "CloseSessionReq", 0x06: "CloseSessionResp",
        0x07: "FinalizeCtx", 0x10: "StorageReadReq", 0x11: "StorageReadResp",
        0x12: "StorageWriteReq", 0x13: "StorageWriteResp", 0x14: "StorageDeleteReq",
        0x15: "StorageDeleteResp", 0x20: "TraceDumpReq", 0x21: "TraceDumpResp",
    }
    assert {int(t): t.name for t in MsgType} == expected
    assert {int(t): cls.__name__ for t, cls in MESSAGES.items()} == expected


GOLDEN_CODES = {
    "Success": 0x00000000, "ErrorGeneric": 0xFFFF0000, "ErrorAccessDenied": 0xFFFF0001,
    "ErrorBadParameters": 0xFFFF0006, "ErrorBadState": 0xFFFF0007,
    "ErrorItemNotFound": 0xFFFF0008, "ErrorOutOfMemory": 0xFFFF000C,
    "ErrorCommunication": 0xFFFF000E, "ErrorSecurity": 0xFFFF000F,
    "ErrorTargetDead": 0xFFFF3024,
}


def test_return_code_golden_values():
    assert {c.name: int(c) for c in ReturnCode} == GOLDEN_CODES


def test_return_codes_stable_across_processes():
    out = subprocess.run(
        [sys.executable, "-c",
         "from vtee.core import ReturnCode; print({c.name: int(c) for c in ReturnCode})"],
        capture_output=True, text=True, check=True).stdout
    assert eval(out) == GOLDEN_CODES


def test_ta_defined_codes_survive():
    assert ReturnCode.coerce(0x1234) == 0x1234
    assert code_name(0x1234) == "0x00001234"
    assert code_name(0xFFFF0008) == "ErrorItemNotFound"
    with pytest.raises(ValueError):
        ReturnCode.coerce(1 << 32)


@settings(max_examples=300, deadline=None)
@given(operation, st.integers(0, (1 << 64) - 1), uuids)
def test_open_request_round_trip(op, rid, uuid):
    msg = OpenSessionReq(rid, rid ^ 5, uuid, op)
    back = decode_message(decode_frame(msg.encode()))
    assert back == msg


@settings(max_examples=300, deadline=None)
@given(operation, word)
def test_all_param_variants_round_trip(op, cmd):
    msg = InvokeReq(9, 3, cmd, op)
    assert decode_message(decode_frame(msg.encode())).operation == op


def test_operation_shape():
    assert len(Operation().params) == 4
    with pytest.raises(ValueError):
        Operation((NoneParam(),) * 3)
    with pytest.raises(TypeError):
        Operation((1, 2, 3, 4))


def test_truncated_payload_rejected():
    raw = OpenSessionReq(1, 2, Uuid(bytes(16)), Operation()).encode()
    f = decode_frame(raw)
    with pytest.raises(FrameError):
        decode_message(Frame(f.msg_type, f.payload[:-1]))
    with pytest.raises(FrameError):
        decode_message(Frame(f.msg_type, f.payload + b"\x00"))


def test_read_frame_from_stream():
    class Stream:
        def __init__(self, data):
            self.data = data

        def recv(self, n):
            out, self.data = self.data[:n], self.data[n:]
            return out

    raw = encode_frame(Frame(0x05, b"hello"))
    s = Stream(raw + raw)
    assert read_frame(s) == Frame(0x05, b"hello")
    assert read_frame(s) == Frame(0x05, b"hello")
    assert read_frame(s) is None
    with pytest.raises(TruncatedFrame):
        read_frame(Stream(raw[:3]))


def test_manifest_round_trip_and_accepts():
    image = b"image"
    m = TaManifest(Uuid(bytes(range(16))), "t", {compute_digest(image)}, False, 100)
    assert TaManifest.parse(m.dumps()) == m
    assert m.accepts(image) and not m.accepts(image + b"!")
    with pytest.raises(ValueError):
        TaManifest(Uuid(bytes(16)), "t", set())


def test_parse_kv_comments_and_errors():
    assert parse_kv("# c\n\na = 1\nb=x=y\n") == {"a": "1", "b": "x=y"}
    with pytest.raises(ValueError):
        parse_kv("novalue")
