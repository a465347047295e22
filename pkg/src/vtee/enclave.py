"""Abstract SGX-like machine.

The machine models what the isolation argument needs and nothing more: which
pages belong to which enclave, whether the single CPU is in enclave mode, the
state save area (SSA) that AEX writes into enclave memory, and a set of cached
translations. Enclave code itself is not emulated; host callbacks drive the
machine and route their memory traffic through :meth:`EnclaveMachine.mem_read`
and :meth:`EnclaveMachine.mem_write`.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Callable

from .core import compute_digest
from .trace import (AccessDenied, Aex, Ecreate, Eenter, Eexit, Einit, Eresume,
                    SyscallDenied, Trace)

NUM_REGS = 8
WORD_MASK = (1 << 64) - 1
SCRUB_VALUE = 0
ABORT_BYTE = 0xFF
SAVED_STATE_SIZE = (NUM_REGS + 1) * 8
DEFAULT_PAGE_SIZE = 4096
DEFAULT_SSA_CAP = 16


class EnclaveError(Exception):
    pass


class Misaligned(EnclaveError):
    pass


class RangeOverlap(EnclaveError):
    pass


class AddressError(EnclaveError):
    pass


class BadLifecycleState(EnclaveError):
    pass


class AlreadyInEnclave(EnclaveError):
    pass


class BadEntryPoint(EnclaveError):
    pass


class NotInEnclave(EnclaveError):
    pass


class EmptySsa(EnclaveError):
    pass


class SsaOverflow(EnclaveError):
    pass


class CrossEnclaveFault(EnclaveError):
    """Enclave-mode access to a page owned by a different enclave."""


class SyscallProhibited(EnclaveError):
    pass


class EnclaveState(enum.Enum):
    Created = "created"
    Initialized = "initialized"


@dataclass
class Page:
    addr: int
    data: bytearray
    owner: int | None = None


@dataclass(frozen=True)
class SavedState:
    regs: tuple
    pc: int

    def pack(self) -> bytes:
        return struct.pack(f"<{NUM_REGS + 1}Q", *self.regs, self.pc)

    @classmethod
    def unpack(cls, raw: bytes) -> "SavedState":
        words = struct.unpack(f"<{NUM_REGS + 1}Q", raw)
        return cls(tuple(words[:NUM_REGS]), words[NUM_REGS])


@dataclass
class Enclave:
    id: int
    base: int
    size: int
    measurement: bytes
    entry_points: frozenset
    heap_base: int
    heap_size: int
    ssa_base: int
    state: EnclaveState = EnclaveState.Created
    ssa_depth: int = 0

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end

    def overlaps(self, start: int, end: int) -> bool:
        return start < self.end and self.base < end


@dataclass
class CpuState:
    enclave: int | None = None
    regs: list = field(default_factory=lambda: [0] * NUM_REGS)
    pc: int = 0
    tlb: set = field(default_factory=set)

    @property
    def in_enclave(self) -> bool:
        return self.enclave is not None


class EnclaveMachine:
    """Single-CPU machine; callers serialize all operations."""

    def __init__(self, page_size: int = DEFAULT_PAGE_SIZE, address_space: int = 1 << 32,
                 ssa_cap: int = DEFAULT_SSA_CAP):
        if page_size <= 0 or page_size & (page_size - 1):
            raise ValueError("page size must be a power of two")
        self.page_size = page_size
        self.address_space = address_space
        self.ssa_cap = ssa_cap
        self.pages: dict[int, Page] = {}
        self.enclaves: dict[int, Enclave] = {}
        self.cpu = CpuState()
        self.trace = Trace()
        self.syscall_hook: Callable | None = None
        self._next_id = 1

    # -- helpers -----------------------------------------------------------

    def _pages_for(self, nbytes: int) -> int:
        return max(1, -(-nbytes // self.page_size))

    def page(self, addr: int) -> Page:
        if not 0 <= addr < self.address_space:
            raise AddressError(f"address 0x{addr:x} outside machine address space")
        base = addr - addr % self.page_size
        pg = self.pages.get(base)
        if pg is None:
            pg = self.pages[base] = Page(base, bytearray(self.page_size))
        return pg

    def _enclave(self, eid: int) -> Enclave:
        try:
            return self.enclaves[eid]
        except KeyError:
            raise BadLifecycleState(f"no enclave {eid}") from None

    def _flush_tlb(self, enc: Enclave) -> None:
        self.cpu.tlb = {(s, e) for (s, e) in self.cpu.tlb if not enc.overlaps(s, e)}

    def tlb_fill(self, start: int, size: int) -> None:
        self.cpu.tlb.add((start, start + size))

    def _cache(self, pg: Page) -> None:
        self.cpu.tlb.add((pg.addr, pg.addr + self.page_size))

    def set_regs(self, regs) -> None:
        regs = [int(r) & WORD_MASK for r in regs]
        if len(regs) != NUM_REGS:
            raise ValueError(f"register file has {NUM_REGS} words")
        self.cpu.regs = regs

    # -- lifecycle ---------------------------------------------------------

    def ecreate(self, image: bytes, base: int, entry_points=None, heap_pages: int = 0) -> int:
        """Allocate and measure an enclave laid out as image | heap | SSA pages."""
        if self.cpu.in_enclave:
            raise AlreadyInEnclave("ECREATE is not available in enclave mode")
        if base % self.page_size:
            raise Misaligned(f"base 0x{base:x} not aligned to {self.page_size}")
        ps = self.page_size
        image_pages = self._pages_for(len(image))
        ssa_pages = self._pages_for(self.ssa_cap * SAVED_STATE_SIZE)
        size = (image_pages + heap_pages + ssa_pages) * ps
        end = base + size
        if end > self.address_space:
            raise AddressError("enclave range exceeds the address space")
        for other in self.enclaves.values():
            if other.overlaps(base, end):
                raise RangeOverlap(
                    f"[0x{base:x}, 0x{end:x}) overlaps enclave {other.id}")
        entries = frozenset(entry_points if entry_points is not None else (base,))
        bad = [e for e in entries if not base <= e < end]
        if bad:
            raise BadEntryPoint(f"entry points outside range: {[hex(e) for e in bad]}")

        eid = self._next_id
        self._next_id += 1
        for addr in range(base, end, ps):
            pg = self.page(addr)
            pg.owner = eid
            pg.data[:] = bytes(ps)
        for off in range(0, len(image), ps):
            chunk = image[off:off + ps]
            self.pages[base + off].data[:len(chunk)] = chunk
        enc = Enclave(
            id=eid, base=base, size=size, measurement=compute_digest(image),
            entry_points=entries,
            heap_base=base + image_pages * ps, heap_size=heap_pages * ps,
            ssa_base=base + (image_pages + heap_pages) * ps,
        )
        self.enclaves[eid] = enc
        self.trace.append(Ecreate(eid))
        return eid

    def range_size(self, image_len: int, heap_pages: int = 0) -> int:
        """Bytes an ``ecreate`` of this shape will claim."""
        ssa_pages = self._pages_for(self.ssa_cap * SAVED_STATE_SIZE)
        return (self._pages_for(image_len) + heap_pages + ssa_pages) * self.page_size

    def einit(self, eid: int) -> None:
        enc = self._enclave(eid)
        if enc.state is not EnclaveState.Created:
            raise BadLifecycleState(f"enclave {eid} already initialized")
        enc.state = EnclaveState.Initialized
        self.trace.append(Einit(eid))

    def eenter(self, eid: int, entry: int) -> None:
        enc = self._enclave(eid)
        if self.cpu.in_enclave:
            raise AlreadyInEnclave(f"CPU already in enclave {self.cpu.enclave}")
        if enc.state is not EnclaveState.Initialized:
            raise BadLifecycleState(f"enclave {eid} not initialized")
        if entry not in enc.entry_points:
            raise BadEntryPoint(f"0x{entry:x} is not an entry point of enclave {eid}")
        self._flush_tlb(enc)
        self.cpu.enclave = eid
        self.cpu.pc = entry
        self.trace.append(Eenter(eid))

    def eexit(self, eid: int) -> None:
        if self.cpu.enclave != eid:
            raise NotInEnclave(f"CPU is not executing enclave {eid}")
        # Registers are deliberately left as the enclave set them.
        self.cpu.enclave = None
        self._flush_tlb(self.enclaves[eid])
        self.trace.append(Eexit(eid))

    def aex(self, reason: int = 0) -> None:
        eid = self.cpu.enclave
        if eid is None:
            raise NotInEnclave("AEX outside enclave mode")
        enc = self.enclaves[eid]
        if enc.ssa_depth >= self.ssa_cap:
            raise SsaOverflow(f"SSA of enclave {eid} full ({self.ssa_cap} frames)")
        frame = SavedState(tuple(self.cpu.regs), self.cpu.pc).pack()
        self._raw_write(enc.ssa_base + enc.ssa_depth * SAVED_STATE_SIZE, frame)
        enc.ssa_depth += 1
        self.cpu.regs = [SCRUB_VALUE] * NUM_REGS
        self.cpu.pc = 0
        self.cpu.enclave = None
        self._flush_tlb(enc)
        self.trace.append(Aex(eid, reason))

    def eresume(self, eid: int) -> None:
        enc = self._enclave(eid)
        if enc.state is not EnclaveState.Initialized:
            raise BadLifecycleState(f"enclave {eid} not initialized")
        if self.cpu.in_enclave:
            raise AlreadyInEnclave(f"CPU already in enclave {self.cpu.enclave}")
        if enc.ssa_depth == 0:
            raise EmptySsa(f"enclave {eid} has no saved state")
        enc.ssa_depth -= 1
        saved = SavedState.unpack(
            self._raw_read(enc.ssa_base + enc.ssa_depth * SAVED_STATE_SIZE, SAVED_STATE_SIZE))
        self._flush_tlb(enc)
        self.cpu.regs = list(saved.regs)
        self.cpu.pc = saved.pc
        self.cpu.enclave = eid
        self.trace.append(Eresume(eid))

    def ssa_frames(self, eid: int) -> list[SavedState]:
        """Decode the SSA stack straight from enclave memory (bottom first)."""
        enc = self._enclave(eid)
        return [
            SavedState.unpack(self._raw_read(enc.ssa_base + i * SAVED_STATE_SIZE,
                                             SAVED_STATE_SIZE))
            for i in range(enc.ssa_depth)
        ]

    def remove_enclave(self, eid: int) -> None:
        """Tear down an enclave and return its pages to the unowned pool."""
        enc = self._enclave(eid)
        if self.cpu.enclave == eid:
            raise AlreadyInEnclave("cannot remove the executing enclave")
        for addr in range(enc.base, enc.end, self.page_size):
            pg = self.pages[addr]
            pg.owner = None
            pg.data[:] = bytes(self.page_size)
        self._flush_tlb(enc)
        del self.enclaves[eid]

    # -- memory ------------------------------------------------------------

    def _raw_read(self, addr: int, n: int) -> bytes:
        return bytes(self.page(a).data[a % self.page_size] for a in range(addr, addr + n))

    def _raw_write(self, addr: int, data: bytes) -> None:
        for i, b in enumerate(data):
            a = addr + i
            self.page(a).data[a % self.page_size] = b

    def mem_read(self, addr: int) -> int:
        pg = self.page(addr)
        if not self._cpu_may_access(pg, addr, "r"):
            return ABORT_BYTE
        self._cache(pg)
        return pg.data[addr % self.page_size]

    def mem_write(self, addr: int, value: int) -> None:
        pg = self.page(addr)
        if not self._cpu_may_access(pg, addr, "w"):
            return
        self._cache(pg)
        pg.data[addr % self.page_size] = value & 0xFF

    def _cpu_may_access(self, pg: Page, addr: int, op: str) -> bool:
        cur = self.cpu.enclave
        if pg.owner is None or pg.owner == cur:
            return True
        self.trace.append(AccessDenied(self.cpu.pc, addr, op))
        if cur is not None:
            raise CrossEnclaveFault(
                f"enclave {cur} touched 0x{addr:x} owned by enclave {pg.owner}")
        return False

    def read_bytes(self, addr: int, n: int) -> bytes:
        return bytes(self.mem_read(a) for a in range(addr, addr + n))

    def write_bytes(self, addr: int, data: bytes) -> None:
        for i, b in enumerate(data):
            self.mem_write(addr + i, b)

    def agent_access(self, addr: int, op: str, value: int = 0):
        """Physical access by a non-CPU agent such as a DMA engine."""
        if op not in ("r", "w"):
            raise ValueError(f"agents read or write, not {op!r}")
        pg = self.page(addr)
        if pg.owner is not None:
            self.trace.append(AccessDenied(None, addr, op))
            return ABORT_BYTE if op == "r" else None
        if op == "r":
            return pg.data[addr % self.page_size]
        pg.data[addr % self.page_size] = value & 0xFF
        return None

    # -- system calls ------------------------------------------------------

    def syscall(self, *args):
        if self.cpu.in_enclave:
            self.trace.append(SyscallDenied(self.cpu.enclave))
            raise SyscallProhibited("SYSCALL/SYSENTER are prohibited in enclave mode")
        if self.syscall_hook is None:
            return None
        return self.syscall_hook(*args)
