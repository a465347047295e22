"""Machine event traces and their line-oriented export format.

One record per line::

    SEQ EVENT key=value ...

e.g. ``7 AEX enclave=1 reason=32``. SEQ is the per-machine sequence number,
so a listing filtered to one TA keeps the machine-wide ordering visible.
"""
from __future__ import annotations

import re
import threading
from dataclasses import dataclass, fields
from typing import ClassVar, Iterable, NamedTuple


@dataclass(frozen=True)
class TraceEvent:
    NAME: ClassVar[str] = ""

    def export_fields(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


@dataclass(frozen=True)
class Ecreate(TraceEvent):
    enclave: int
    NAME: ClassVar[str] = "ECREATE"


@dataclass(frozen=True)
class Einit(TraceEvent):
    enclave: int
    NAME: ClassVar[str] = "EINIT"


@dataclass(frozen=True)
class Eenter(TraceEvent):
    enclave: int
    NAME: ClassVar[str] = "EENTER"


@dataclass(frozen=True)
class Eexit(TraceEvent):
    enclave: int
    NAME: ClassVar[str] = "EEXIT"


@dataclass(frozen=True)
class Aex(TraceEvent):
    enclave: int
    reason: int
    NAME: ClassVar[str] = "AEX"


@dataclass(frozen=True)
class Eresume(TraceEvent):
    enclave: int
    NAME: ClassVar[str] = "ERESUME"


@dataclass(frozen=True)
class SyscallDenied(TraceEvent):
    enclave: int
    NAME: ClassVar[str] = "SYSCALL_DENIED"


@dataclass(frozen=True)
class IpcSend(TraceEvent):
    sender: int
    receiver: int
    NAME: ClassVar[str] = "IPC_SEND"

    def export_fields(self):
        return [("from", self.sender), ("to", self.receiver)]


@dataclass(frozen=True)
class IpcRecv(TraceEvent):
    task: int
    sender: int
    NAME: ClassVar[str] = "IPC_RECV"

    def export_fields(self):
        return [("task", self.task), ("from", self.sender)]


@dataclass(frozen=True)
class SecureInterrupt(TraceEvent):
    task: int
    NAME: ClassVar[str] = "SECURE_INTERRUPT"


@dataclass(frozen=True)
class TaskResume(TraceEvent):
    task: int
    NAME: ClassVar[str] = "TASK_RESUME"


@dataclass(frozen=True)
class AccessDenied(TraceEvent):
    """``pc`` is None for non-CPU agents (DMA)."""

    pc: int | None
    addr: int
    op: str
    NAME: ClassVar[str] = "ACCESS_DENIED"

    def export_fields(self):
        pc = "agent" if self.pc is None else f"0x{self.pc:x}"
        return [("pc", pc), ("addr", f"0x{self.addr:x}"), ("op", self.op)]


SGX_EVENTS = (Ecreate, Einit, Eenter, Eexit, Aex, Eresume)
EVENT_TYPES = {cls.NAME: cls for cls in SGX_EVENTS + (
    SyscallDenied, IpcSend, IpcRecv, SecureInterrupt, TaskResume, AccessDenied)}


class TraceRecord(NamedTuple):
    seq: int
    event: TraceEvent

    @property
    def name(self) -> str:
        return self.event.NAME


class Trace:
    """Append-only event log with a total order per machine."""

    def __init__(self, index=None):
        self._records: list[TraceRecord] = []
        self._lock = threading.Lock()
        self._index_fn = index
        self._index: dict = {}

    def append(self, event: TraceEvent) -> TraceRecord:
        with self._lock:
            rec = TraceRecord(len(self._records), event)
            self._records.append(rec)
            if self._index_fn is not None:
                for key in self._index_fn(event):
                    self._index.setdefault(key, []).append(rec)
            return rec

    def for_key(self, key) -> list[TraceRecord]:
        """Records the index function filed under ``key`` (copy)."""
        with self._lock:
            return list(self._index.get(key, ()))

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(list(self._records))

    def __getitem__(self, i):
        return self._records[i]

    def since(self, mark: int) -> list[TraceRecord]:
        return self._records[mark:]

    def events(self) -> list[TraceEvent]:
        return [r.event for r in self._records]

    def names(self) -> list[str]:
        return [r.event.NAME for r in self._records]


def format_record(rec: TraceRecord) -> str:
    parts = [str(rec.seq), rec.event.NAME]
    parts += [f"{k}={v}" for k, v in rec.event.export_fields()]
    return " ".join(parts)


def export_trace(records: Iterable[TraceRecord]) -> str:
    return "".join(format_record(r) + "\n" for r in records)


def parse_trace(text: str) -> list[tuple[int, str, dict]]:
    """Parse an exported listing into ``(seq, name, fields)`` tuples."""
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        seq, name, *rest = line.split()
        if name not in EVENT_TYPES:
            raise ValueError(f"unknown trace event {name!r}")
        attrs = dict(kv.split("=", 1) for kv in rest)
        out.append((int(seq), name, attrs))
    return out


def event_names(records: Iterable[TraceRecord]) -> list[str]:
    return [r.event.NAME for r in records]


# --------------------------------------------------------------------------
# SGX trace grammar: Ecreate Einit (Eenter (Aex Eresume)* Eexit)*

_LETTER = {"ECREATE": "C", "EINIT": "I", "EENTER": "E", "AEX": "A", "ERESUME": "R", "EEXIT": "X"}
_GRAMMAR = re.compile(r"CI(?:E(?:AR)*X)*")
_PREFIX = re.compile(r"(?:C(?:I(?:E(?:AR)*X)*(?:E(?:AR)*A?)?)?)?")


def sgx_grammar_ok(records: Iterable[TraceRecord], allow_open: bool = False) -> bool:
    """Check every enclave's SGX sub-trace against the lifecycle grammar.

    With ``allow_open`` a trace cut in the middle of an enclave call (e.g. a
    dispatch still parked in AEX) is also accepted.
    """
    per_enclave: dict[int, list[str]] = {}
    for rec in records:
        letter = _LETTER.get(rec.event.NAME)
        if letter is not None:
            per_enclave.setdefault(rec.event.enclave, []).append(letter)
    pattern = _PREFIX if allow_open else _GRAMMAR
    return all(pattern.fullmatch("".join(seq)) for seq in per_enclave.values())
