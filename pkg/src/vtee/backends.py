"""Isolation engines that bind the TA runtime to one of the two machines.

``SgxEngine`` maps every dispatch to EENTER..EEXIT on a shared
:class:`EnclaveMachine` and every proxied service call to an AEX/ERESUME
pair. ``TytanEngine`` runs each TA as a secure task on an
:class:`EampuPlatform`; dispatches and service calls are IPC hops through
the TEE Core task, which only talks to registered secure tasks.

Both machines model a single CPU, so each engine holds a CPU lock from
enter to leave and drops it while the TA is parked on a proxied call.
"""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass

from .core import Operation, Reader, ReturnCode, TeeError, Uuid, Writer, compute_digest
from .eampu import EampuPlatform, TaskKind
from .enclave import SAVED_STATE_SIZE, EnclaveMachine
from .runtime import (DispatchResult, Entry, EntryRequest, GetTime, InvokeTa, Launcher,
                      ProxyOutcome, StorageDelete, StorageRead, StorageWrite)
from .trace import Trace

PROXY_AEX_REASON = 0x20
GUARD_PAGES = 1


class _CpuLock:
    """The CPU, owned by at most one TA handle at a time."""

    def __init__(self):
        self._lock = threading.Lock()
        self.owner = None

    def acquire(self, handle) -> None:
        self._lock.acquire()
        self.owner = handle

    def release(self, handle) -> None:
        if self.owner is handle:
            self.owner = None
            self._lock.release()

    def __enter__(self):
        self._lock.acquire()
        return self

    def __exit__(self, *exc):
        self._lock.release()


# -- SGX ---------------------------------------------------------------------


def _enclave_keys(event):
    enclave = getattr(event, "enclave", None)
    return () if enclave is None else (enclave,)


@dataclass(eq=False)
class SgxHandle:
    uuid: Uuid
    enclave: int
    entry: int
    heap_base: int
    heap_size: int


class SgxEngine:
    name = "sgx"

    def __init__(self, page_size: int = 4096, heap_pages: int = 1, base: int = 0x100000):
        self.machine = EnclaveMachine(page_size=page_size)
        self.machine.trace = Trace(index=_enclave_keys)
        self.heap_pages = heap_pages
        self._next_base = base
        self._cpu = _CpuLock()

    def create(self, uuid: Uuid, image: bytes, valid_digests=()) -> SgxHandle:
        m = self.machine
        with self._cpu:
            base = self._next_base
            size = m.range_size(len(image), self.heap_pages)
            eid = m.ecreate(image, base, heap_pages=self.heap_pages)
            enc = m.enclaves[eid]
            if valid_digests and enc.measurement not in valid_digests:
                m.remove_enclave(eid)
                raise TeeError(ReturnCode.ErrorSecurity, "enclave measurement not bound to uuid")
            self._next_base = base + size + GUARD_PAGES * m.page_size
            m.einit(eid)
        return SgxHandle(uuid, eid, base, enc.heap_base, enc.heap_size)

    def enter(self, h: SgxHandle, request: EntryRequest) -> EntryRequest:
        self._cpu.acquire(h)
        try:
            self.machine.eenter(h.enclave, h.entry)
        except BaseException:
            self._cpu.release(h)
            raise
        return request

    def yield_out(self, h: SgxHandle, request):
        self.machine.aex(PROXY_AEX_REASON)
        self._cpu.release(h)
        return request

    def resume(self, h: SgxHandle, request, outcome: ProxyOutcome) -> ProxyOutcome:
        self._cpu.acquire(h)
        try:
            self.machine.eresume(h.enclave)
        except BaseException:
            self._cpu.release(h)
            raise
        return outcome

    def leave(self, h: SgxHandle, code, operation: Operation):
        try:
            self.machine.eexit(h.enclave)
        finally:
            self._cpu.release(h)
        return code, operation

    def abort(self, h: SgxHandle) -> None:
        if self._cpu.owner is h:
            if self.machine.cpu.enclave == h.enclave:
                self.machine.eexit(h.enclave)
            self._cpu.release(h)

    def release(self, h: SgxHandle) -> None:
        with self._cpu:
            if h.enclave in self.machine.enclaves:
                self.machine.remove_enclave(h.enclave)

    def get_regs(self, h: SgxHandle) -> list[int]:
        return list(self.machine.cpu.regs)

    def set_regs(self, h: SgxHandle, regs) -> None:
        self.machine.set_regs(regs)

    def _heap(self, h: SgxHandle, offset: int, n: int) -> int:
        if offset < 0 or n < 0 or offset + n > h.heap_size:
            raise TeeError(ReturnCode.ErrorBadParameters, "outside TA memory")
        return h.heap_base + offset

    def mem_read(self, h: SgxHandle, offset: int, n: int) -> bytes:
        return self.machine.read_bytes(self._heap(h, offset, n), n)

    def mem_write(self, h: SgxHandle, offset: int, data: bytes) -> None:
        self.machine.write_bytes(self._heap(h, offset, len(data)), data)

    def trace(self, h: SgxHandle) -> list:
        return self.machine.trace.for_key(h.enclave)

    def describe(self) -> dict:
        return {"enclaves": len(self.machine.enclaves)}


# -- TyTAN -------------------------------------------------------------------

CORE_IMAGE = b"VTEE-TEE-CORE v1\n"
OS_IMAGE = b"VTEE-REE-OS v1\n"
CODE_SLOT = 0x1000
SAVE_SLOT = 0x100


class CoreMsg(enum.IntEnum):
    REGISTER = 1
    REGISTERED = 2
    ENTRY = 3
    ENTRY_DONE = 4
    SERVICE_REQ = 5
    SERVICE_RESP = 6
    DENIED = 7


_ENTRIES = list(Entry)


class _Svc(enum.IntEnum):
    READ = 1
    WRITE = 2
    DELETE = 3
    TIME = 4
    INVOKE = 5


def encode_core_msg(kind: CoreMsg, body: bytes = b"") -> bytes:
    return bytes([kind]) + body


def decode_core_msg(payload: bytes) -> tuple[CoreMsg, Reader]:
    if not payload:
        raise ValueError("empty core message")
    return CoreMsg(payload[0]), Reader(payload[1:])


def encode_entry(req: EntryRequest) -> bytes:
    w = Writer()
    w.u8(_ENTRIES.index(req.entry)).u64(req.session).u32(req.command).operation(req.operation)
    return encode_core_msg(CoreMsg.ENTRY, w.getvalue())


def decode_entry(r: Reader) -> EntryRequest:
    entry = _ENTRIES[r.u8()]
    session, command, op = r.u64(), r.u32(), r.operation()
    r.end()
    return EntryRequest(entry, session, command, op)


def encode_service(request) -> bytes:
    w = Writer()
    if isinstance(request, StorageRead):
        w.u8(_Svc.READ).blob(request.object_id)
    elif isinstance(request, StorageWrite):
        w.u8(_Svc.WRITE).blob(request.object_id).blob(request.data)
    elif isinstance(request, StorageDelete):
        w.u8(_Svc.DELETE).blob(request.object_id)
    elif isinstance(request, GetTime):
        w.u8(_Svc.TIME)
    elif isinstance(request, InvokeTa):
        w.u8(_Svc.INVOKE).uuid(request.uuid).u32(request.command_id).operation(request.operation)
    else:
        raise TypeError(f"not a service request: {request!r}")
    return encode_core_msg(CoreMsg.SERVICE_REQ, w.getvalue())


def decode_service(r: Reader):
    kind = _Svc(r.u8())
    if kind is _Svc.READ:
        req = StorageRead(r.blob())
    elif kind is _Svc.WRITE:
        req = StorageWrite(r.blob(), r.blob())
    elif kind is _Svc.DELETE:
        req = StorageDelete(r.blob())
    elif kind is _Svc.TIME:
        req = GetTime()
    else:
        req = InvokeTa(r.uuid(), r.u32(), r.operation())
    r.end()
    return req


def encode_outcome(request, outcome: ProxyOutcome) -> bytes:
    w = Writer().u32(int(outcome.code))
    if outcome.code == ReturnCode.Success:
        if isinstance(request, StorageRead):
            w.blob(outcome.value)
        elif isinstance(request, GetTime):
            w.u64(outcome.value)
        elif isinstance(request, InvokeTa):
            code, op = outcome.value
            w.u32(int(code)).operation(op)
    return encode_core_msg(CoreMsg.SERVICE_RESP, w.getvalue())


def decode_outcome(request, r: Reader) -> ProxyOutcome:
    code = ReturnCode.coerce(r.u32())
    value = None
    if code == ReturnCode.Success:
        if isinstance(request, StorageRead):
            value = r.blob()
        elif isinstance(request, GetTime):
            value = r.u64()
        elif isinstance(request, InvokeTa):
            value = (ReturnCode.coerce(r.u32()), r.operation())
    r.end()
    return ProxyOutcome(code, value)


def _task_keys(event):
    keys = []
    for attr in ("sender", "receiver", "task"):
        v = getattr(event, attr, None)
        if v is not None and v not in keys:
            keys.append(v)
    return keys


@dataclass(eq=False)
class TytanHandle:
    uuid: Uuid
    task: int
    heap_base: int
    heap_size: int
    regions: tuple


class TytanEngine:
    """GP services on the EA-MPU machine, brokered by the TEE Core task."""

    name = "tytan"

    def __init__(self, rule_limit: int = 16, heap_size: int = 4096, base: int = 0x10000):
        p = self.platform = EampuPlatform(rule_limit=rule_limit)
        p.trace = Trace(index=_task_keys)
        self.heap_size = heap_size
        self._next_addr = base
        self._cpu = _CpuLock()
        # task id -> (uuid, digest) for every secure task allowed to use services
        self.registered: dict[int, tuple[Uuid | None, bytes]] = {}
        self._bindings: dict[int, tuple[Uuid, frozenset]] = {}
        self._extra: dict[int, tuple] = {}
        self.denials = 0
        self.core_task = self._load(CORE_IMAGE, TaskKind.Secure, "tee-core")[0]
        self.registered[self.core_task] = (None, p.task(self.core_task).digest)
        self.os_task = self._load(OS_IMAGE, TaskKind.OS, "ree-os")[0]
        p.boot()

    # -- layout ---------------------------------------------------------------

    def _region(self, size: int, kind: str, name: str) -> int:
        rid = self.platform.add_region(self._next_addr, size, kind, name=name)
        self._next_addr += -(-size // 0x100) * 0x100
        return rid

    def _load(self, image: bytes, kind: TaskKind, name: str):
        code_size = max(CODE_SLOT, -(-len(image) // CODE_SLOT) * CODE_SLOT)
        code = self._region(code_size, "code", f"{name}.code")
        data = self._region(self.heap_size, "data", f"{name}.data")
        save = self._region(SAVE_SLOT, "data", f"{name}.save") if kind is TaskKind.Secure else None
        regions = (code, data) + ((save,) if save else ())
        try:
            tid = self.platform.load_task(image, kind, code, [data], save_area=save, name=name)
        except Exception:
            for rid in regions:
                self.platform.regions.pop(rid, None)
            raise
        return tid, data, regions

    def load_normal_task(self, image: bytes, name: str = "normal") -> int:
        """A plain REE task, e.g. a CA trying to reach the core directly."""
        with self._cpu:
            tid, _, regions = self._load(image, TaskKind.Normal, name)
            self._extra[tid] = regions
            return tid

    def load_secure_task(self, image: bytes, name: str = "secure") -> int:
        """A secure task that never registers with the core."""
        with self._cpu:
            tid, _, regions = self._load(image, TaskKind.Secure, name)
            self._extra[tid] = regions
            return tid

    def unload_task(self, tid: int) -> None:
        """Remove a task added with load_normal_task / load_secure_task."""
        with self._cpu:
            if self.platform.current == tid:
                self.platform.dispatch(self.os_task)
            self._unload(tid, self._extra.pop(tid))

    # -- IPC plumbing ---------------------------------------------------------

    def _send(self, src: int, dst: int, payload: bytes) -> None:
        self.platform.dispatch(src)
        self.platform.ipc_send(src, dst, payload)

    def _recv(self, tid: int):
        self.platform.dispatch(tid)
        return self.platform.ipc_recv(tid)

    def _authorized(self, env) -> bool:
        entry = self.registered.get(env.sender_id)
        task = self.platform.tasks.get(env.sender_id)
        return (entry is not None and task is not None and task.kind is TaskKind.Secure
                and entry[1] == env.sender_digest)

    def _deny(self, to: int) -> None:
        self.denials += 1
        self._send(self.core_task, to,
                   encode_core_msg(CoreMsg.DENIED, Writer().u32(ReturnCode.ErrorAccessDenied)
                                   .getvalue()))

    def _core_receive(self, expect: CoreMsg, sender: int | None = None):
        """Core task takes one message; refuses anything not from a registered secure task."""
        env = self._recv(self.core_task)
        try:
            kind, r = decode_core_msg(env.payload)
        except ValueError:
            kind, r = None, None
        if kind is CoreMsg.REGISTER:
            return env, kind, r
        if not self._authorized(env) or (sender is not None and env.sender_id != sender):
            self._deny(env.sender_id)
            return env, None, None
        if kind is not expect:
            self._send(self.core_task, env.sender_id, encode_core_msg(
                CoreMsg.DENIED, Writer().u32(ReturnCode.ErrorBadParameters).getvalue()))
            return env, None, None
        return env, kind, r

    def _task_receive(self, tid: int, expect: CoreMsg) -> Reader:
        env = self._recv(tid)
        if env.sender_id != self.core_task:
            raise TeeError(ReturnCode.ErrorSecurity, "message not from the TEE Core task")
        kind, r = decode_core_msg(env.payload)
        if kind is CoreMsg.DENIED:
            raise TeeError(ReturnCode.coerce(r.u32()), "refused by the TEE Core task")
        if kind is not expect:
            raise TeeError(ReturnCode.ErrorCommunication, f"expected {expect.name}")
        return r

    def _register(self, tid: int, uuid: Uuid) -> None:
        self._send(tid, self.core_task, encode_core_msg(CoreMsg.REGISTER, Writer().uuid(uuid)
                                                        .getvalue()))
        env, _, r = self._core_receive(CoreMsg.REGISTER)
        claimed = r.uuid()
        binding = self._bindings.get(env.sender_id)
        task = self.platform.tasks.get(env.sender_id)
        ok = (binding is not None and task is not None and task.kind is TaskKind.Secure
              and binding[0] == claimed
              and (not binding[1] or env.sender_digest in binding[1]))
        if not ok:
            self._deny(env.sender_id)
        else:
            self.registered[env.sender_id] = (claimed, env.sender_digest)
            self._send(self.core_task, env.sender_id,
                       encode_core_msg(CoreMsg.REGISTERED, Writer().u32(0).getvalue()))
        self._task_receive(tid, CoreMsg.REGISTERED)

    def raw_core_request(self, task: int, payload: bytes) -> bytes:
        """Send ``payload`` to the core as ``task``; returns the core's reply payload.

        Nothing stands behind this path, so an accepted service request is
        answered with ErrorItemNotFound. Refusals carry ErrorAccessDenied.
        """
        with self._cpu:
            self._send(task, self.core_task, payload)
            env, kind, r = self._core_receive(CoreMsg.SERVICE_REQ)
            if kind is CoreMsg.REGISTER:
                self._deny(env.sender_id)
            elif kind is CoreMsg.SERVICE_REQ:
                try:
                    request = decode_service(r)
                    reply = encode_outcome(request, ProxyOutcome(ReturnCode.ErrorItemNotFound))
                except Exception:
                    reply = encode_core_msg(CoreMsg.DENIED, Writer().u32(
                        ReturnCode.ErrorBadParameters).getvalue())
                self._send(self.core_task, env.sender_id, reply)
            out = self._recv(task)
            self.platform.dispatch(self.os_task)
            return out.payload

    # -- engine interface -----------------------------------------------------

    def create(self, uuid: Uuid, image: bytes, valid_digests=()) -> TytanHandle:
        with self._cpu:
            digest = compute_digest(image)
            if valid_digests and digest not in valid_digests:
                raise TeeError(ReturnCode.ErrorSecurity, "task measurement not bound to uuid")
            tid, data, regions = self._load(image, TaskKind.Secure, f"ta-{uuid}")
            self._bindings[tid] = (uuid, frozenset(valid_digests))
            try:
                self._register(tid, uuid)
            except BaseException:
                self.platform.dispatch(self.os_task)
                self._unload(tid, regions)
                raise
            self.platform.dispatch(self.os_task)
        d = self.platform.region(data)
        return TytanHandle(uuid, tid, d.base, d.size, regions)

    def enter(self, h: TytanHandle, request: EntryRequest) -> EntryRequest:
        self._cpu.acquire(h)
        try:
            if h.task not in self.registered:
                raise TeeError(ReturnCode.ErrorAccessDenied, "task is not registered")
            self._send(self.core_task, h.task, encode_entry(request))
            return decode_entry(self._task_receive(h.task, CoreMsg.ENTRY))
        except BaseException:
            self.platform.dispatch(self.os_task)
            self._cpu.release(h)
            raise

    def yield_out(self, h: TytanHandle, request):
        self._send(h.task, self.core_task, encode_service(request))
        env, kind, r = self._core_receive(CoreMsg.SERVICE_REQ, sender=h.task)
        if kind is None:
            self._task_receive(h.task, CoreMsg.SERVICE_RESP)  # raises the refusal
        delivered = decode_service(r)
        self.platform.dispatch(self.os_task)
        self._cpu.release(h)
        return delivered

    def resume(self, h: TytanHandle, request, outcome: ProxyOutcome) -> ProxyOutcome:
        self._cpu.acquire(h)
        try:
            self._send(self.core_task, h.task, encode_outcome(request, outcome))
            return decode_outcome(request, self._task_receive(h.task, CoreMsg.SERVICE_RESP))
        except BaseException:
            self.platform.dispatch(self.os_task)
            self._cpu.release(h)
            raise

    def leave(self, h: TytanHandle, code, operation: Operation):
        try:
            w = Writer().u32(int(code)).operation(operation)
            self._send(h.task, self.core_task, encode_core_msg(CoreMsg.ENTRY_DONE, w.getvalue()))
            env, kind, r = self._core_receive(CoreMsg.ENTRY_DONE, sender=h.task)
            if kind is None:
                raise TeeError(ReturnCode.ErrorSecurity, "core refused the entry result")
            out = ReturnCode.coerce(r.u32()), r.operation()
            r.end()
            return out
        finally:
            self.platform.dispatch(self.os_task)
            self._cpu.release(h)

    def abort(self, h: TytanHandle) -> None:
        if self._cpu.owner is h:
            self.platform.queues.get(h.task, []).clear()
            self.platform.queues[self.core_task].clear()
            self.platform.dispatch(self.os_task)
            self._cpu.release(h)

    def _unload(self, tid: int, regions) -> None:
        self.registered.pop(tid, None)
        self._bindings.pop(tid, None)
        if tid in self.platform.tasks:
            self.platform.unload_task(tid)
        for rid in regions:
            self.platform.regions.pop(rid, None)

    def release(self, h: TytanHandle) -> None:
        with self._cpu:
            if self.platform.current == h.task:
                self.platform.dispatch(self.os_task)
            self._unload(h.task, h.regions)

    def get_regs(self, h: TytanHandle) -> list[int]:
        return list(self.platform.regs)

    def set_regs(self, h: TytanHandle, regs) -> None:
        self.platform.set_regs(regs)

    def _heap(self, h: TytanHandle, offset: int, n: int) -> int:
        if offset < 0 or n < 0 or offset + n > h.heap_size:
            raise TeeError(ReturnCode.ErrorBadParameters, "outside TA memory")
        return h.heap_base + offset

    def mem_read(self, h: TytanHandle, offset: int, n: int) -> bytes:
        base = self._heap(h, offset, n)
        return bytes(self.platform.mem_access(h.task, base + i, "r") for i in range(n))

    def mem_write(self, h: TytanHandle, offset: int, data: bytes) -> None:
        base = self._heap(h, offset, len(data))
        for i, b in enumerate(data):
            self.platform.mem_access(h.task, base + i, "w", b)

    def trace(self, h: TytanHandle) -> list:
        return self.platform.trace.for_key(h.task)

    def describe(self) -> dict:
        return {"tasks": len(self.platform.tasks), "core_task": self.core_task,
                "rules": len(self.platform.rules)}


# -- backend contract --------------------------------------------------------


class Backend:
    """The seam the manager talks to; identical CA-visible semantics on both engines."""

    def __init__(self, engine):
        self.engine = engine
        self.name = engine.name
        self.launcher = Launcher(engine)

    def load_ta(self, uuid: Uuid, image: bytes, endpoint_factory, valid_digests=(),
                single_instance: bool = True):
        return self.launcher.launch(uuid, image, endpoint_factory, valid_digests,
                                    single_instance)

    def create(self, inst) -> DispatchResult:
        return inst.dispatch_create()

    def open_session(self, inst, session: int, params: Operation) -> DispatchResult:
        return inst.dispatch_open_session(session, params)

    def invoke(self, inst, session: int, command_id: int, params: Operation) -> DispatchResult:
        return inst.dispatch_invoke(session, command_id, params)

    def close_session(self, inst, session: int) -> DispatchResult:
        return inst.dispatch_close_session(session)

    def destroy(self, inst) -> DispatchResult:
        result = inst.dispatch_destroy()
        self.launcher.forget(inst)
        return result

    def trace(self, inst) -> list:
        return self.engine.trace(inst.handle) if inst.handle is not None else []


def make_backend(kind: str, page_size: int = 4096, rule_limit: int = 16) -> Backend:
    if kind == "sgx":
        return Backend(SgxEngine(page_size=page_size))
    if kind == "tytan":
        return Backend(TytanEngine(rule_limit=rule_limit))
    raise ValueError(f"backend is sgx or tytan, not {kind!r}")


__all__ = ["SgxEngine", "TytanEngine", "Backend", "make_backend", "CoreMsg",
           "encode_service", "decode_service", "encode_entry", "decode_entry",
           "encode_core_msg", "decode_core_msg", "SAVED_STATE_SIZE"]
