"""TA hosting: one instance = an I/O thread plus a TA logic thread.

The I/O thread owns the conversation with the manager and drives the
isolation engine; the logic thread runs the TA's entry-point hooks. When a
hook needs a system service it cannot perform in isolation (storage, time,
another TA) the logic thread yields: the engine records the exit (AEX on the
SGX machine, an IPC hop through the TEE Core task on TyTAN), the I/O thread
performs the request against the manager, re-enters, and hands the result
back. Exactly one of the two threads does TA-visible work at any instant.

Engines are duck-typed and provide::

    create(uuid, image, valid_digests) -> handle
    enter(handle, EntryRequest) -> EntryRequest
    yield_out(handle, request) -> request as seen by the service side
    resume(handle, request, ProxyOutcome) -> ProxyOutcome
    leave(handle, code, operation) -> (code, operation)
    release(handle) / abort(handle)
    get_regs(handle) / set_regs(handle, regs)
    mem_read(handle, offset, n) / mem_write(handle, offset, data)
    trace(handle) -> list[TraceRecord]
"""
from __future__ import annotations

import enum
import itertools
import logging
import queue
import secrets
import threading
from collections import deque
from concurrent.futures import Future, TimeoutError as FutureTimeout
from dataclasses import dataclass, field, replace

from .core import (INPUT_ONLY, MEMREF_OUT_TYPES, CloseSessionReq, InvokeReq, NoneParam,
                   OpenSessionReq, Operation, ReturnCode, StorageDeleteReq, StorageReadReq,
                   StorageWriteReq, TeeError, Uuid, ValueInOut, ValueOut, decode_frame,
                   decode_message)
from .enclave import NUM_REGS

log = logging.getLogger(__name__)

DISPATCH_TIMEOUT = 60.0
WORD32 = 0xFFFFFFFF


class Entry(enum.Enum):
    CREATE = "TA_CreateEntryPoint"
    DESTROY = "TA_DestroyEntryPoint"
    OPEN_SESSION = "TA_OpenSessionEntryPoint"
    CLOSE_SESSION = "TA_CloseSessionEntryPoint"
    INVOKE_COMMAND = "TA_InvokeCommandEntryPoint"


@dataclass(frozen=True)
class EntryRequest:
    entry: Entry
    session: int = 0
    command: int = 0
    operation: Operation = field(default_factory=Operation)


class Lifecycle(enum.Enum):
    Launched = "launched"
    Created = "created"
    Active = "active"
    Destroyed = "destroyed"
    Dead = "dead"


# -- proxied service requests -------------------------------------------------


@dataclass(frozen=True)
class StorageRead:
    object_id: bytes


@dataclass(frozen=True)
class StorageWrite:
    object_id: bytes
    data: bytes


@dataclass(frozen=True)
class StorageDelete:
    object_id: bytes


@dataclass(frozen=True)
class GetTime:
    pass


@dataclass(frozen=True)
class InvokeTa:
    """Internal Client API call: open, invoke once, close."""

    uuid: Uuid
    command_id: int
    operation: Operation


ProxyRequest = (StorageRead, StorageWrite, StorageDelete, GetTime, InvokeTa)


@dataclass(frozen=True)
class ProxyOutcome:
    """``value`` is bytes (read), int (time), (code, Operation) (invoke) or None."""

    code: int = ReturnCode.Success
    value: object = None


class SpawnFailure(TeeError):
    def __init__(self, message):
        super().__init__(ReturnCode.ErrorGeneric, message)


class ProxyBusy(TeeError):
    def __init__(self):
        super().__init__(ReturnCode.ErrorBadState, "a proxied request is already outstanding")


class ProxyUnavailable(TeeError):
    def __init__(self, entry: Entry):
        super().__init__(ReturnCode.ErrorBadState,
                         f"system services are not reachable from {entry.value}")


# -- TA logic -----------------------------------------------------------------


class TrustedApp:
    """Base class for TA logic. Override the hooks you need.

    Hooks receive a :class:`TaServices` handle, never the manager. Session
    hooks get ``params`` as a mutable list of four parameters; replace
    output slots to return data. A hook may return a ReturnCode (None means
    Success) or raise :class:`TeeError`.
    """

    def create(self, svc: "TaServices"):
        return ReturnCode.Success

    def destroy(self, svc: "TaServices"):
        return None

    def open_session(self, svc: "TaServices", session: int, params: list):
        return ReturnCode.Success

    def close_session(self, svc: "TaServices", session: int):
        return None

    def invoke_command(self, svc: "TaServices", session: int, command_id: int, params: list):
        return ReturnCode.ErrorBadParameters


_LOGIC: dict[str, type] = {}
IMAGE_MAGIC = b"VTEE-TA"


def register_logic(name: str):
    def deco(cls):
        _LOGIC[name] = cls
        return cls
    return deco


def make_image(logic: str, body: bytes = b"") -> bytes:
    return IMAGE_MAGIC + b" logic=" + logic.encode() + b"\n" + body


def image_logic(image: bytes) -> str:
    head, _, _ = image.partition(b"\n")
    parts = head.split()
    if not parts or parts[0] != IMAGE_MAGIC:
        raise SpawnFailure("image is not a TA image")
    for p in parts[1:]:
        k, _, v = p.partition(b"=")
        if k == b"logic":
            return v.decode("ascii", "replace")
    raise SpawnFailure("image names no logic")


def resolve_logic(image: bytes) -> TrustedApp:
    name = image_logic(image)
    cls = _LOGIC.get(name)
    if cls is None:
        raise SpawnFailure(f"no TA logic named {name!r}")
    return cls()


# -- thread handoff -----------------------------------------------------------


class Baton:
    """Exclusive right to do TA-visible work, passed between the two threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self.holder: str | None = None
        self.violations = 0
        self.log: deque = deque(maxlen=4096)

    def take(self, who: str) -> None:
        if not self._lock.acquire(blocking=False):
            self.violations += 1
            self._lock.acquire()
        self.holder = who
        self.log.append((who, "take"))

    def give(self, who: str) -> None:
        self.log.append((who, "give"))
        self.holder = None
        self._lock.release()

    def note(self, who: str, what: str) -> None:
        self.log.append((who, what))


class _Aborted(BaseException):
    """Unwinds a hook whose proxied call could not be completed."""


_ABORT = object()


@dataclass
class _Yield:
    request: object
    reply: queue.Queue


@dataclass
class _Done:
    code: int = ReturnCode.Success
    params: list | None = None
    panic: BaseException | None = None


@dataclass
class _Job:
    request: EntryRequest
    future: Future


@dataclass(frozen=True)
class DispatchResult:
    code: int
    operation: Operation
    trace: list


class TaServices:
    """The only door a hook has to the outside world."""

    def __init__(self, instance: "TaInstance"):
        self._inst = instance
        self._active = False
        self._entry: Entry | None = None
        self._busy = threading.Lock()

    def _call(self, request):
        inst = self._inst
        if not self._active:
            raise TeeError(ReturnCode.ErrorBadState, "services used outside a hook")
        if self._entry in (Entry.CREATE, Entry.DESTROY):
            raise ProxyUnavailable(self._entry)
        if not self._busy.acquire(blocking=False):
            raise ProxyBusy()
        try:
            delivered = inst.engine.yield_out(inst.handle, request)
            reply: queue.Queue = queue.Queue(maxsize=1)
            inst.baton.give("logic")
            inst._mailbox.put(_Yield(delivered, reply))
            outcome = reply.get()
            inst.baton.take("logic")
        finally:
            self._busy.release()
        if outcome is _ABORT:
            raise _Aborted("I/O side failed while this hook was parked")
        if outcome.code != ReturnCode.Success:
            raise TeeError(outcome.code)
        return outcome.value

    def storage_read(self, object_id: bytes) -> bytes:
        return self._call(StorageRead(bytes(object_id)))

    def storage_write(self, object_id: bytes, data: bytes) -> None:
        self._call(StorageWrite(bytes(object_id), bytes(data)))

    def storage_delete(self, object_id: bytes) -> None:
        self._call(StorageDelete(bytes(object_id)))

    def get_time(self) -> int:
        return self._call(GetTime())

    def invoke_ta(self, uuid: Uuid, command_id: int, operation: Operation | None = None):
        """Returns (code, Operation) of the target TA's command."""
        return self._call(InvokeTa(uuid, command_id, operation or Operation()))

    def mem_read(self, offset: int, n: int) -> bytes:
        if not self._active:
            raise TeeError(ReturnCode.ErrorBadState, "memory used outside a hook")
        return self._inst.engine.mem_read(self._inst.handle, offset, n)

    def mem_write(self, offset: int, data: bytes) -> None:
        if not self._active:
            raise TeeError(ReturnCode.ErrorBadState, "memory used outside a hook")
        self._inst.engine.mem_write(self._inst.handle, offset, data)


def _check_outputs(original: Operation, params) -> tuple[bool, Operation]:
    """Copy TA outputs back; input slots keep their values, capacities are hard."""
    params = list(params) if params is not None else list(original.params)
    ok = len(params) == len(original.params)
    out = []
    for i, orig in enumerate(original.params):
        new = params[i] if i < len(params) else orig
        if isinstance(orig, INPUT_ONLY) or new is orig:
            out.append(orig)
        elif type(new) is not type(orig):
            ok = False
            out.append(replace(orig, data=b"") if isinstance(orig, MEMREF_OUT_TYPES) else orig)
        elif isinstance(orig, MEMREF_OUT_TYPES):
            data = bytes(new.data)
            if len(data) > orig.capacity:
                ok = False
                data = b""
            out.append(replace(orig, data=data))
        elif isinstance(orig, (ValueOut, ValueInOut)):
            out.append(type(orig)(int(new.a) & WORD32, int(new.b) & WORD32))
        else:
            out.append(orig)
    return ok, Operation(tuple(out))


class TaInstance:
    def __init__(self, uuid: Uuid, image: bytes, engine, endpoint, valid_digests=(),
                 single_instance: bool = True):
        self.uuid = uuid
        self.image = image
        self.logic = resolve_logic(image)
        self.engine = engine
        self.io_endpoint = endpoint
        self.valid_digests = frozenset(valid_digests)
        self.single_instance = single_instance
        self.handle = None
        self.lifecycle = Lifecycle.Launched
        self.sessions: set[int] = set()
        self.baton = Baton()
        self.services = TaServices(self)
        self._requests: queue.Queue = queue.Queue()
        self._to_logic: queue.Queue = queue.Queue()
        self._mailbox: queue.Queue = queue.Queue()
        self._request_ids = itertools.count(1)
        self._io = threading.Thread(target=self._io_loop, name=f"ta-io-{uuid}", daemon=True)
        self._logic = threading.Thread(target=self._logic_loop, name=f"ta-logic-{uuid}",
                                       daemon=True)
        self._io.start()
        self._logic.start()

    def __repr__(self):
        return f"<TaInstance {self.uuid} {self.lifecycle.value} sessions={sorted(self.sessions)}>"

    @property
    def alive(self) -> bool:
        return self.lifecycle not in (Lifecycle.Destroyed, Lifecycle.Dead)

    # -- public dispatch API (manager side) -------------------------------

    def _submit(self, request: EntryRequest) -> DispatchResult:
        if not self._io.is_alive():
            code = (ReturnCode.ErrorTargetDead if self.lifecycle is Lifecycle.Dead
                    else ReturnCode.ErrorBadState)
            return DispatchResult(code, request.operation, [])
        fut: Future = Future()
        self._requests.put(_Job(request, fut))
        try:
            return fut.result(timeout=DISPATCH_TIMEOUT)
        except FutureTimeout:
            raise TeeError(ReturnCode.ErrorTargetDead, "TA did not answer") from None

    def dispatch_create(self) -> DispatchResult:
        return self._submit(EntryRequest(Entry.CREATE))

    def dispatch_open_session(self, session: int, params: Operation | None = None):
        return self._submit(EntryRequest(Entry.OPEN_SESSION, session, 0, params or Operation()))

    def dispatch_invoke(self, session: int, command_id: int, params: Operation | None = None):
        return self._submit(EntryRequest(Entry.INVOKE_COMMAND, session, command_id,
                                         params or Operation()))

    def dispatch_close_session(self, session: int) -> DispatchResult:
        return self._submit(EntryRequest(Entry.CLOSE_SESSION, session))

    def dispatch_destroy(self) -> DispatchResult:
        return self._submit(EntryRequest(Entry.DESTROY))

    def shutdown(self) -> None:
        """Stop both threads without running any entry point."""
        self._requests.put(None)
        self._io.join(timeout=5)

    # -- I/O thread ---------------------------------------------------------

    def _io_loop(self) -> None:
        while True:
            job = self._requests.get()
            if job is None:
                break
            self.baton.take("io")
            try:
                result = self._handle(job.request)
            except BaseException as exc:  # pragma: no cover - defensive
                log.exception("dispatch failed")
                result = DispatchResult(ReturnCode.ErrorGeneric, job.request.operation, [])
                self.baton.give("io")
                job.future.set_result(result)
                continue
            self.baton.give("io")
            job.future.set_result(result)
            if not self.alive:
                break
        self._to_logic.put(None)
        if self.lifecycle is Lifecycle.Launched:
            self.lifecycle = Lifecycle.Destroyed
        # Anything queued behind the final dispatch is answered, not dropped.
        while True:
            try:
                job = self._requests.get_nowait()
            except queue.Empty:
                break
            if job is not None:
                code = (ReturnCode.ErrorTargetDead if self.lifecycle is Lifecycle.Dead
                        else ReturnCode.ErrorBadState)
                job.future.set_result(DispatchResult(code, job.request.operation, []))

    def _precheck(self, req: EntryRequest):
        if self.lifecycle is Lifecycle.Dead:
            return ReturnCode.ErrorTargetDead
        if self.lifecycle is Lifecycle.Destroyed:
            return ReturnCode.ErrorBadState
        if req.entry is Entry.CREATE:
            return None if self.lifecycle is Lifecycle.Launched else ReturnCode.ErrorBadState
        if self.lifecycle is Lifecycle.Launched:
            return ReturnCode.ErrorBadState
        if req.entry in (Entry.INVOKE_COMMAND, Entry.CLOSE_SESSION):
            return None if req.session in self.sessions else ReturnCode.ErrorBadState
        if req.entry is Entry.DESTROY and self.sessions:
            return ReturnCode.ErrorBadState
        return None

    def _handle(self, req: EntryRequest) -> DispatchResult:
        bad = self._precheck(req)
        if bad is not None:
            return DispatchResult(bad, req.operation, [])
        if req.entry is Entry.CREATE:
            try:
                self.handle = self.engine.create(self.uuid, self.image, self.valid_digests)
            except TeeError as exc:
                self.lifecycle = Lifecycle.Destroyed
                return DispatchResult(exc.code, req.operation, [])
            except Exception:
                log.exception("backend refused to create %s", self.uuid)
                self.lifecycle = Lifecycle.Destroyed
                return DispatchResult(ReturnCode.ErrorGeneric, req.operation, [])
            mark = 0
        else:
            mark = len(self.engine.trace(self.handle))

        try:
            code, op = self._run(req)
        except TeeError as exc:
            code, op = exc.code, req.operation
        except Exception:
            log.exception("backend fault during %s", req.entry.value)
            self.engine.abort(self.handle)
            code, op = ReturnCode.ErrorGeneric, req.operation
        trace = self.engine.trace(self.handle)[mark:]

        if code == ReturnCode.ErrorTargetDead:
            self._teardown(Lifecycle.Dead)
        elif req.entry is Entry.CREATE:
            if code == ReturnCode.Success:
                self.lifecycle = Lifecycle.Created
            else:
                self._teardown(Lifecycle.Destroyed)
                code = ReturnCode.ErrorGeneric
        elif req.entry is Entry.OPEN_SESSION and code == ReturnCode.Success:
            self.sessions.add(req.session)
            self.lifecycle = Lifecycle.Active
        elif req.entry is Entry.CLOSE_SESSION:
            self.sessions.discard(req.session)
            code = ReturnCode.Success
        elif req.entry is Entry.DESTROY:
            self._teardown(Lifecycle.Destroyed)
            code = ReturnCode.Success
        return DispatchResult(code, op, trace)

    def _teardown(self, state: Lifecycle) -> None:
        self.sessions.clear()
        self.lifecycle = state
        if self.handle is not None:
            try:
                self.engine.release(self.handle)
            except Exception:
                log.exception("release of %s failed", self.uuid)

    def _run(self, req: EntryRequest):
        engine, handle = self.engine, self.handle
        delivered = engine.enter(handle, req)
        regs = [secrets.randbits(64) for _ in range(NUM_REGS)]
        engine.set_regs(handle, regs)
        self.baton.give("io")
        self._to_logic.put(delivered)
        fault = None
        while True:
            msg = self._mailbox.get()
            self.baton.take("io")
            if isinstance(msg, _Done):
                break
            try:
                self.baton.note("io", "serve-start")
                outcome = self._serve(msg.request)
                self.baton.note("io", "serve-end")
                outcome = engine.resume(handle, msg.request, outcome)
                if engine.get_regs(handle) != regs:
                    raise TeeError(ReturnCode.ErrorSecurity, "TA context not restored intact")
            except Exception as exc:
                log.error("proxy round trip for %s failed: %r", self.uuid, exc)
                fault = exc
                outcome = _ABORT
            self.baton.give("io")
            msg.reply.put(outcome)

        if fault is not None:
            engine.abort(handle)
            return ReturnCode.ErrorTargetDead, req.operation
        if msg.panic is not None:
            log.warning("TA %s panicked in %s: %r", self.uuid, req.entry.value, msg.panic)
            engine.leave(handle, ReturnCode.ErrorTargetDead, req.operation)
            return ReturnCode.ErrorTargetDead, req.operation
        ok, op = _check_outputs(req.operation, msg.params)
        code = msg.code if ok else ReturnCode.ErrorBadParameters
        return engine.leave(handle, code, op)

    # -- request service (I/O thread, TA logic parked) ----------------------

    def _exchange(self, message):
        raw = self.io_endpoint.exchange(message.encode())
        return decode_message(decode_frame(raw))

    def _serve(self, request) -> ProxyOutcome:
        rid = next(self._request_ids)
        try:
            if isinstance(request, StorageRead):
                resp = self._exchange(StorageReadReq(rid, request.object_id))
                return ProxyOutcome(resp.code, resp.data)
            if isinstance(request, StorageWrite):
                resp = self._exchange(StorageWriteReq(rid, request.object_id, request.data))
                return ProxyOutcome(resp.code)
            if isinstance(request, StorageDelete):
                resp = self._exchange(StorageDeleteReq(rid, request.object_id))
                return ProxyOutcome(resp.code)
            if isinstance(request, GetTime):
                return ProxyOutcome(ReturnCode.Success, self.io_endpoint.get_time())
            if isinstance(request, InvokeTa):
                return self._internal_invoke(rid, request)
        except TeeError as exc:
            return ProxyOutcome(exc.code)
        return ProxyOutcome(ReturnCode.ErrorBadParameters)

    def _internal_invoke(self, rid: int, req: InvokeTa) -> ProxyOutcome:
        ctx = self.io_endpoint.context_id
        opened = self._exchange(OpenSessionReq(rid, ctx, req.uuid, Operation()))
        if opened.code != ReturnCode.Success:
            return ProxyOutcome(opened.code)
        try:
            done = self._exchange(InvokeReq(next(self._request_ids), opened.session_id,
                                            req.command_id, req.operation))
        finally:
            self._exchange(CloseSessionReq(next(self._request_ids), opened.session_id))
        return ProxyOutcome(ReturnCode.Success, (done.code, done.operation))

    # -- logic thread -------------------------------------------------------

    def _logic_loop(self) -> None:
        svc = self.services
        while True:
            req = self._to_logic.get()
            if req is None:
                return
            self.baton.take("logic")
            svc._entry = req.entry
            svc._active = True
            done = _Done()
            try:
                done = self._call_hook(req)
            except TeeError as exc:
                done = _Done(exc.code, None)
            except BaseException as exc:
                done = _Done(ReturnCode.ErrorTargetDead, None, panic=exc)
            finally:
                svc._active = False
                svc._entry = None
                self.baton.give("logic")
                self._mailbox.put(done)

    def _call_hook(self, req: EntryRequest) -> _Done:
        logic, svc = self.logic, self.services
        if req.entry is Entry.CREATE:
            return _Done(_code(logic.create(svc)))
        if req.entry is Entry.DESTROY:
            logic.destroy(svc)
            return _Done()
        if req.entry is Entry.CLOSE_SESSION:
            logic.close_session(svc, req.session)
            return _Done()
        params = list(req.operation.params)
        if req.entry is Entry.OPEN_SESSION:
            code = logic.open_session(svc, req.session, params)
        else:
            code = logic.invoke_command(svc, req.session, req.command, params)
        return _Done(_code(code), params)


def _code(value) -> int:
    return ReturnCode.Success if value is None else ReturnCode.coerce(int(value))


class Launcher:
    """Spawns TA instances on demand; single-instance TAs are reused."""

    def __init__(self, engine):
        self.engine = engine
        self._live: dict[Uuid, list[TaInstance]] = {}
        self._lock = threading.Lock()
        self.launch_count = 0

    def launch(self, uuid: Uuid, image: bytes, endpoint_factory, valid_digests=(),
               single_instance: bool = True) -> tuple[TaInstance, bool]:
        """Returns (instance, fresh)."""
        with self._lock:
            live = [i for i in self._live.get(uuid, []) if i.alive]
            self._live[uuid] = live
            if single_instance and live:
                return live[0], False
            inst = TaInstance(uuid, image, self.engine, endpoint_factory(), valid_digests,
                              single_instance)
            live.append(inst)
            self.launch_count += 1
            return inst, True

    def forget(self, inst: TaInstance) -> None:
        with self._lock:
            live = self._live.get(inst.uuid, [])
            if inst in live:
                live.remove(inst)

    def instances(self, uuid: Uuid | None = None) -> list[TaInstance]:
        with self._lock:
            if uuid is not None:
                return [i for i in self._live.get(uuid, []) if i.alive]
            return [i for group in self._live.values() for i in group if i.alive]


def launch(uuid: Uuid, image: bytes, engine, endpoint, valid_digests=(),
           single_instance: bool = True) -> TaInstance:
    return TaInstance(uuid, image, engine, endpoint, valid_digests, single_instance)


__all__ = [
    "Entry", "EntryRequest", "Lifecycle", "StorageRead", "StorageWrite", "StorageDelete",
    "GetTime", "InvokeTa", "ProxyOutcome", "TrustedApp", "TaServices", "TaInstance",
    "DispatchResult", "Launcher", "launch", "register_logic", "make_image", "image_logic",
    "resolve_logic", "SpawnFailure", "ProxyBusy", "ProxyUnavailable", "NoneParam",
]
