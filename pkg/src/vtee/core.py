"""Shared domain types, measurement primitives and the binary wire protocol.

Everything in here is an immutable value or a pure function so it can be
used freely from the manager's connection threads and the TA I/O threads.
"""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import ClassVar, Iterable, Union

PARAM_COUNT = 4
MAX_OBJECT_ID = 64


class TeeError(Exception):
    """An operation failed with a GP return code."""

    def __init__(self, code: "int | ReturnCode", message: str = ""):
        self.code = ReturnCode.coerce(code)
        super().__init__(message or _code_name(self.code))


class MalformedUuid(ValueError):
    pass


class FrameError(ValueError):
    pass


class TruncatedFrame(FrameError):
    pass


class LengthMismatch(FrameError):
    pass


class UnknownMsgType(FrameError):
    pass


# --------------------------------------------------------------------------
# identities


@dataclass(frozen=True, order=True)
class Uuid:
    bytes: bytes

    def __post_init__(self):
        if len(self.bytes) != 16:
            raise MalformedUuid(f"uuid needs 16 octets, got {len(self.bytes)}")

    @classmethod
    def parse(cls, text: str) -> "Uuid":
        return parse_uuid(text)

    def __str__(self) -> str:
        return format_uuid(self)


_HYPHENS = (8, 13, 18, 23)
_HEX = frozenset("0123456789abcdefABCDEF")


def parse_uuid(text: str) -> Uuid:
    if len(text) != 36:
        raise MalformedUuid(f"bad uuid length {len(text)}: {text!r}")
    for i, ch in enumerate(text):
        if i in _HYPHENS:
            if ch != "-":
                raise MalformedUuid(f"expected '-' at position {i}: {text!r}")
        elif ch not in _HEX:
            raise MalformedUuid(f"non-hex character {ch!r} in {text!r}")
    return Uuid(bytes.fromhex(text.replace("-", "")))


def format_uuid(u: Uuid) -> str:
    h = u.bytes.hex()
    return f"{h[:8]}-{h[8:12]}-{h[12:16]}-{h[16:20]}-{h[20:]}"


def compute_digest(image: bytes) -> bytes:
    """Load-time measurement of a task or enclave image (SHA-256)."""
    return hashlib.sha256(image).digest()


# --------------------------------------------------------------------------
# return codes


class ReturnCode(enum.IntEnum):
    Success = 0x00000000
    ErrorGeneric = 0xFFFF0000
    ErrorAccessDenied = 0xFFFF0001
    ErrorBadParameters = 0xFFFF0006
    ErrorBadState = 0xFFFF0007
    ErrorItemNotFound = 0xFFFF0008
    ErrorOutOfMemory = 0xFFFF000C
    ErrorCommunication = 0xFFFF000E
    ErrorSecurity = 0xFFFF000F
    ErrorTargetDead = 0xFFFF3024

    @classmethod
    def coerce(cls, value: int) -> "int | ReturnCode":
        """Known codes become members; TA-defined codes stay plain ints."""
        try:
            return cls(value)
        except ValueError:
            if not 0 <= int(value) <= 0xFFFFFFFF:
                raise ValueError(f"return code out of range: {value}")
            return int(value)


def _code_name(code: int) -> str:
    return code.name if isinstance(code, ReturnCode) else f"0x{code:08x}"


def code_name(code: int) -> str:
    return _code_name(ReturnCode.coerce(code))


# --------------------------------------------------------------------------
# operation parameters


@dataclass(frozen=True)
class NoneParam:
    TAG: ClassVar[int] = 0


@dataclass(frozen=True)
class ValueIn:
    a: int = 0
    b: int = 0
    TAG: ClassVar[int] = 1


@dataclass(frozen=True)
class ValueOut:
    a: int = 0
    b: int = 0
    TAG: ClassVar[int] = 2


@dataclass(frozen=True)
class ValueInOut:
    a: int = 0
    b: int = 0
    TAG: ClassVar[int] = 3


@dataclass(frozen=True)
class MemrefIn:
    data: bytes = b""
    TAG: ClassVar[int] = 4


@dataclass(frozen=True)
class MemrefOut:
    """Output buffer. ``data`` is empty on the way in and filled by the TA."""

    capacity: int
    data: bytes = b""
    TAG: ClassVar[int] = 5

    def filled(self, data: bytes) -> "MemrefOut":
        return replace(self, data=bytes(data))


@dataclass(frozen=True)
class MemrefInOut:
    data: bytes
    capacity: int
    TAG: ClassVar[int] = 6

    def filled(self, data: bytes) -> "MemrefInOut":
        return replace(self, data=bytes(data))


Parameter = Union[NoneParam, ValueIn, ValueOut, ValueInOut, MemrefIn, MemrefOut, MemrefInOut]
PARAM_TYPES = (NoneParam, ValueIn, ValueOut, ValueInOut, MemrefIn, MemrefOut, MemrefInOut)
_BY_TAG = {t.TAG: t for t in PARAM_TYPES}
INPUT_ONLY = (NoneParam, ValueIn, MemrefIn)
VALUE_TYPES = (ValueIn, ValueOut, ValueInOut)
MEMREF_OUT_TYPES = (MemrefOut, MemrefInOut)


@dataclass(frozen=True)
class Operation:
    params: tuple = field(default_factory=lambda: (NoneParam(),) * PARAM_COUNT)

    def __post_init__(self):
        params = tuple(self.params)
        if len(params) != PARAM_COUNT:
            raise ValueError(f"an operation carries exactly {PARAM_COUNT} parameters")
        for p in params:
            if not isinstance(p, PARAM_TYPES):
                raise TypeError(f"not a parameter: {p!r}")
        object.__setattr__(self, "params", params)

    @classmethod
    def of(cls, *params: Parameter) -> "Operation":
        if len(params) > PARAM_COUNT:
            raise ValueError(f"at most {PARAM_COUNT} parameters")
        return cls(tuple(params) + (NoneParam(),) * (PARAM_COUNT - len(params)))

    def __getitem__(self, i: int) -> Parameter:
        return self.params[i]

    def __iter__(self):
        return iter(self.params)


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class TaManifest:
    uuid: Uuid
    name: str
    valid_digests: frozenset
    single_instance: bool = True
    storage_quota: int = 64 * 1024

    def __post_init__(self):
        object.__setattr__(self, "valid_digests", frozenset(self.valid_digests))
        if not self.valid_digests:
            raise ValueError("a manifest must bind at least one digest")
        for d in self.valid_digests:
            if len(d) != 32:
                raise ValueError("digests are 32 octets")
        if self.storage_quota < 0:
            raise ValueError("negative storage quota")

    def accepts(self, image: bytes) -> bool:
        return compute_digest(image) in self.valid_digests

    @classmethod
    def parse(cls, text: str) -> "TaManifest":
        kv = parse_kv(text)
        try:
            return cls(
                uuid=parse_uuid(kv["uuid"]),
                name=kv["name"],
                single_instance=parse_bool(kv.get("single_instance", "true")),
                valid_digests=frozenset(
                    bytes.fromhex(d.strip()) for d in kv["digests"].split(",") if d.strip()
                ),
                storage_quota=int(kv.get("quota", 64 * 1024)),
            )
        except KeyError as exc:
            raise ValueError(f"manifest missing key {exc.args[0]!r}") from None

    def dumps(self) -> str:
        digests = ",".join(sorted(d.hex() for d in self.valid_digests))
        return (
            f"uuid={self.uuid}\n"
            f"name={self.name}\n"
            f"single_instance={'true' if self.single_instance else 'false'}\n"
            f"digests={digests}\n"
            f"quota={self.storage_quota}\n"
        )


def parse_kv(text: str) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# --------------------------------------------------------------------------
# frames


class MsgType(enum.IntEnum):
    OpenSessionReq = 0x01
    OpenSessionResp = 0x02
    InvokeReq = 0x03
    InvokeResp = 0x04
    CloseSessionReq = 0x05
    CloseSessionResp = 0x06
    FinalizeCtx = 0x07
    StorageReadReq = 0x10
    StorageReadResp = 0x11
    StorageWriteReq = 0x12
    StorageWriteResp = 0x13
    StorageDeleteReq = 0x14
    StorageDeleteResp = 0x15
    TraceDumpReq = 0x20
    TraceDumpResp = 0x21


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes = b""

    @property
    def known(self) -> bool:
        return self.msg_type in MsgType._value2member_map_

    @property
    def length(self) -> int:
        return 1 + len(self.payload)


def encode_frame(f: Frame) -> bytes:
    if not 0 <= f.msg_type <= 0xFF:
        raise FrameError(f"msg_type does not fit one octet: {f.msg_type}")
    return struct.pack("<IB", 1 + len(f.payload), f.msg_type) + bytes(f.payload)


def decode_frame(b: bytes, strict: bool = False) -> Frame:
    """Inverse of :func:`encode_frame`.

    Unknown message types are kept (``Frame.known`` is False) unless
    ``strict`` is set, in which case :class:`UnknownMsgType` is raised.
    """
    if len(b) < 5:
        raise TruncatedFrame(f"need at least 5 octets, got {len(b)}")
    (length,) = struct.unpack_from("<I", b)
    if length < 1 or length != len(b) - 4:
        raise LengthMismatch(f"length field {length} but {len(b) - 4} octets follow")
    msg_type = b[4]
    if msg_type in MsgType._value2member_map_:
        msg_type = MsgType(msg_type)
    elif strict:
        raise UnknownMsgType(f"unknown msg_type 0x{msg_type:02x}")
    return Frame(msg_type, bytes(b[5:]))


def read_frame(stream) -> Frame | None:
    """Read one frame from a socket-like object. None on clean EOF."""
    head = _recv_exact(stream, 4, allow_eof=True)
    if head is None:
        return None
    (length,) = struct.unpack("<I", head)
    if length < 1:
        raise LengthMismatch("zero-length frame")
    body = _recv_exact(stream, length)
    return decode_frame(head + body)


def _recv_exact(sock, n: int, allow_eof: bool = False) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            if allow_eof and got == 0:
                return None
            raise TruncatedFrame(f"stream ended after {got} of {n} octets")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


# --------------------------------------------------------------------------
# payload field codec


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<B", v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<I", v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<Q", v))
        return self

    def blob(self, v: bytes) -> "Writer":
        self.u32(len(v))
        self._parts.append(bytes(v))
        return self

    def uuid(self, v: Uuid) -> "Writer":
        self._parts.append(v.bytes)
        return self

    def operation(self, op: Operation) -> "Writer":
        for p in op.params:
            self.param(p)
        return self

    def param(self, p: Parameter) -> "Writer":
        self.u8(p.TAG)
        if isinstance(p, VALUE_TYPES):
            self.u32(p.a).u32(p.b)
        elif isinstance(p, MemrefIn):
            self.blob(p.data)
        elif isinstance(p, MEMREF_OUT_TYPES):
            self.u32(p.capacity).blob(p.data)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes):
        self._data = memoryview(bytes(data))
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise TruncatedFrame(f"payload ends before {n} more octets at {self._pos}")
        out = self._data[self._pos:self._pos + n].tobytes()
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def blob(self) -> bytes:
        return self._take(self.u32())

    def uuid(self) -> Uuid:
        return Uuid(self._take(16))

    def operation(self) -> Operation:
        return Operation(tuple(self.param() for _ in range(PARAM_COUNT)))

    def param(self) -> Parameter:
        tag = self.u8()
        cls = _BY_TAG.get(tag)
        if cls is None:
            raise FrameError(f"unknown parameter tag {tag}")
        if cls is NoneParam:
            return NoneParam()
        if cls in VALUE_TYPES:
            return cls(self.u32(), self.u32())
        if cls is MemrefIn:
            return MemrefIn(self.blob())
        capacity = self.u32()
        data = self.blob()
        if len(data) > capacity:
            raise FrameError(f"memref carries {len(data)} octets over capacity {capacity}")
        return MemrefOut(capacity, data) if cls is MemrefOut else MemrefInOut(data, capacity)

    def end(self) -> None:
        if self._pos != len(self._data):
            raise LengthMismatch(f"{len(self._data) - self._pos} trailing octets in payload")


# --------------------------------------------------------------------------
# messages carried in frames

_FIELD_IO = {
    "u32": (Writer.u32, Reader.u32),
    "u64": (Writer.u64, Reader.u64),
    "rc": (Writer.u32, lambda r: ReturnCode.coerce(r.u32())),
    "blob": (Writer.blob, Reader.blob),
    "uuid": (Writer.uuid, Reader.uuid),
    "op": (Writer.operation, Reader.operation),
}


class Message:
    """Base for frame payloads; subclasses list their fields in wire order."""

    MSG_TYPE: ClassVar[MsgType]
    FIELDS: ClassVar[tuple] = ()

    def to_frame(self) -> Frame:
        w = Writer()
        for name, kind in self.FIELDS:
            _FIELD_IO[kind][0](w, getattr(self, name))
        return Frame(self.MSG_TYPE, w.getvalue())

    def encode(self) -> bytes:
        return encode_frame(self.to_frame())


def _message(name: str, msg_type: MsgType, *fields):
    annotations = {fname: kind for fname, kind in fields}
    cls = type(name, (Message,), {
        "__annotations__": annotations,
        "__module__": __name__,
        "MSG_TYPE": msg_type,
        "FIELDS": tuple(fields),
    })
    return dataclass(frozen=True)(cls)


OpenSessionReq = _message("OpenSessionReq", MsgType.OpenSessionReq,
                          ("request_id", "u64"), ("context_id", "u64"), ("uuid", "uuid"),
                          ("operation", "op"))
OpenSessionResp = _message("OpenSessionResp", MsgType.OpenSessionResp,
                           ("request_id", "u64"), ("code", "rc"), ("session_id", "u64"),
                           ("operation", "op"))
InvokeReq = _message("InvokeReq", MsgType.InvokeReq,
                     ("request_id", "u64"), ("session_id", "u64"), ("command_id", "u32"),
                     ("operation", "op"))
InvokeResp = _message("InvokeResp", MsgType.InvokeResp,
                      ("request_id", "u64"), ("code", "rc"), ("operation", "op"))
CloseSessionReq = _message("CloseSessionReq", MsgType.CloseSessionReq,
                           ("request_id", "u64"), ("session_id", "u64"))
CloseSessionResp = _message("CloseSessionResp", MsgType.CloseSessionResp,
                            ("request_id", "u64"), ("code", "rc"))
FinalizeCtx = _message("FinalizeCtx", MsgType.FinalizeCtx,
                       ("request_id", "u64"), ("context_id", "u64"))
StorageReadReq = _message("StorageReadReq", MsgType.StorageReadReq,
                          ("request_id", "u64"), ("object_id", "blob"))
StorageReadResp = _message("StorageReadResp", MsgType.StorageReadResp,
                           ("request_id", "u64"), ("code", "rc"), ("data", "blob"))
StorageWriteReq = _message("StorageWriteReq", MsgType.StorageWriteReq,
                           ("request_id", "u64"), ("object_id", "blob"), ("data", "blob"))
StorageWriteResp = _message("StorageWriteResp", MsgType.StorageWriteResp,
                            ("request_id", "u64"), ("code", "rc"))
StorageDeleteReq = _message("StorageDeleteReq", MsgType.StorageDeleteReq,
                            ("request_id", "u64"), ("object_id", "blob"))
StorageDeleteResp = _message("StorageDeleteResp", MsgType.StorageDeleteResp,
                             ("request_id", "u64"), ("code", "rc"))
TraceDumpReq = _message("TraceDumpReq", MsgType.TraceDumpReq,
                        ("request_id", "u64"), ("uuid", "uuid"))
TraceDumpResp = _message("TraceDumpResp", MsgType.TraceDumpResp,
                         ("request_id", "u64"), ("code", "rc"), ("text", "blob"))

MESSAGES = {
    cls.MSG_TYPE: cls
    for cls in (
        OpenSessionReq, OpenSessionResp, InvokeReq, InvokeResp, CloseSessionReq,
        CloseSessionResp, FinalizeCtx, StorageReadReq, StorageReadResp, StorageWriteReq,
        StorageWriteResp, StorageDeleteReq, StorageDeleteResp, TraceDumpReq, TraceDumpResp,
    )
}


def decode_message(frame: Frame) -> Message:
    cls = MESSAGES.get(frame.msg_type)
    if cls is None:
        raise UnknownMsgType(f"unknown msg_type 0x{int(frame.msg_type):02x}")
    r = Reader(frame.payload)
    values = {name: _FIELD_IO[kind][1](r) for name, kind in cls.FIELDS}
    r.end()
    return cls(**values)


def digests_hex(digests: Iterable[bytes]) -> list[str]:
    return sorted(d.hex() for d in digests)
