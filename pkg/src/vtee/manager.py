"""The manager: TA registry, session routing, sealed storage, and the backend.

The manager owns every TA instance's I/O endpoint (a :class:`TaChannel`), so
the identity of a storage caller is the channel it arrived on, never a field
in the request. A TA instance lives while it has sessions: the first open
launches and creates it, the last close destroys it.
"""
from __future__ import annotations

import enum
import itertools
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .backends import Backend, make_backend
from .core import (CloseSessionReq, CloseSessionResp, InvokeReq, InvokeResp, OpenSessionReq,
                   OpenSessionResp, Operation, ReturnCode, StorageDeleteReq, StorageDeleteResp,
                   StorageReadReq, StorageReadResp, StorageWriteReq, StorageWriteResp,
                   TaManifest, TeeError, Uuid, compute_digest, decode_frame, decode_message,
                   parse_kv)
from .runtime import DispatchResult, TaInstance
from .storage import SealedStore
from .trace import export_trace

log = logging.getLogger(__name__)

BACKENDS = ("sgx", "tytan")
INTERNAL_CONTEXT_BIT = 1 << 63


class ConfigError(ValueError):
    pass


class DigestMismatch(Exception):
    pass


class DuplicateUuid(Exception):
    pass


@dataclass(frozen=True)
class ManagerConfig:
    socket_path: str
    storage_dir: str
    master_key: bytes
    backend: str = "sgx"
    page_size: int = 4096
    rule_limit: int = 16

    def __post_init__(self):
        if len(self.master_key) != 32:
            raise ConfigError("master_key must be exactly 32 octets")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        if self.page_size <= 0 or self.page_size & (self.page_size - 1):
            raise ConfigError("page_size must be a power of two")
        if self.rule_limit < 4:
            raise ConfigError("rule_limit must leave room for the TCB tasks")

    @classmethod
    def parse(cls, text: str, base_dir: str | os.PathLike = ".") -> "ManagerConfig":
        try:
            kv = parse_kv(text)
            key = kv["master_key"]
            if len(key) != 64:
                raise ConfigError("master_key must be 64 hex characters")
            base = Path(base_dir).resolve()
            return cls(
                socket_path=str(base / kv["socket_path"]),
                storage_dir=str(base / kv["storage_dir"]),
                master_key=bytes.fromhex(key),
                backend=kv.get("backend", "sgx"),
                page_size=int(kv.get("page_size", "4096"), 0),
                rule_limit=int(kv.get("rule_limit", "16"), 0),
            )
        except KeyError as exc:
            raise ConfigError(f"config is missing {exc.args[0]!r}") from None
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ManagerConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        return cls.parse(text, path.parent)

    def dumps(self) -> str:
        return (f"socket_path={self.socket_path}\nstorage_dir={self.storage_dir}\n"
                f"master_key={self.master_key.hex()}\nbackend={self.backend}\n"
                f"page_size={self.page_size}\nrule_limit={self.rule_limit}\n")


@dataclass
class TaRegistryEntry:
    manifest: TaManifest
    image: bytes
    installed_digest: bytes
    ever_ran: bool = False


class SessionState(enum.Enum):
    Opening = "Opening"
    Open = "Open"
    Closed = "Closed"


@dataclass
class SessionRecord:
    session_id: int
    context_id: int
    uuid: Uuid
    state: SessionState = SessionState.Opening
    instance: TaInstance | None = field(default=None, repr=False, compare=False)


class TaChannel:
    """The private endpoint between the manager and one TA instance."""

    def __init__(self, manager: "Manager", uuid: Uuid, quota: int):
        self.manager = manager
        self.uuid = uuid
        self.quota = quota
        self.context_id = manager.new_internal_context()

    def get_time(self) -> int:
        return self.manager.get_time()

    def exchange(self, raw: bytes) -> bytes:
        msg = decode_message(decode_frame(raw))
        return self.handle(msg).encode()

    def handle(self, msg):
        m, rid = self.manager, msg.request_id
        if isinstance(msg, StorageReadReq):
            try:
                return StorageReadResp(rid, ReturnCode.Success, m.storage_get(self.uuid,
                                                                            msg.object_id))
            except TeeError as exc:
                return StorageReadResp(rid, exc.code, b"")
        if isinstance(msg, StorageWriteReq):
            return StorageWriteResp(rid, _code_of(m.storage_put, self.uuid, msg.object_id,
                                                  msg.data, self.quota))
        if isinstance(msg, StorageDeleteReq):
            return StorageDeleteResp(rid, _code_of(m.storage_delete, self.uuid, msg.object_id))
        if isinstance(msg, OpenSessionReq):
            if msg.uuid == self.uuid:
                # a self-call would wait on its own dispatch queue
                return OpenSessionResp(rid, ReturnCode.ErrorBadState, 0, msg.operation)
            rec, code, op = m.open_session(self.context_id, msg.uuid, msg.operation)
            return OpenSessionResp(rid, code, rec.session_id if rec else 0, op)
        if isinstance(msg, InvokeReq):
            if m.session_context(msg.session_id) != self.context_id:
                return InvokeResp(rid, ReturnCode.ErrorBadState, msg.operation)
            code, op = m.invoke_command(msg.session_id, msg.command_id, msg.operation)
            return InvokeResp(rid, code, op)
        if isinstance(msg, CloseSessionReq):
            if m.session_context(msg.session_id) != self.context_id:
                return CloseSessionResp(rid, ReturnCode.ErrorBadState)
            return CloseSessionResp(rid, m.close_session(msg.session_id))
        raise TeeError(ReturnCode.ErrorBadParameters, f"{type(msg).__name__} not served here")


def _code_of(fn, *args) -> int:
    try:
        fn(*args)
    except TeeError as exc:
        return exc.code
    return ReturnCode.Success


class Manager:
    def __init__(self, config: ManagerConfig, backend: Backend | None = None):
        self.config = config
        self.store = SealedStore(config.storage_dir, config.master_key)
        self.backend = backend or make_backend(config.backend, config.page_size,
                                               config.rule_limit)
        self._lock = threading.RLock()
        self._registry: dict[Uuid, TaRegistryEntry] = {}
        self._sessions: dict[int, SessionRecord] = {}
        self._pending: dict[int, int] = {}
        self._traces: dict[Uuid, list] = {}
        self._session_ids = itertools.count(1)
        self._internal_ids = itertools.count(1)
        self._clock = itertools.count(1)
        self._clock_lock = threading.Lock()

    # -- registry -----------------------------------------------------------

    def install_ta(self, manifest: TaManifest, image: bytes) -> TaRegistryEntry:
        digest = compute_digest(image)
        if digest not in manifest.valid_digests:
            raise DigestMismatch(f"digest mismatch: image measures {digest.hex()}")
        with self._lock:
            if manifest.uuid in self._registry:
                raise DuplicateUuid(f"{manifest.uuid} is already installed")
            entry = self._registry[manifest.uuid] = TaRegistryEntry(manifest, bytes(image), digest)
            return entry

    def registry(self) -> list[TaRegistryEntry]:
        with self._lock:
            return list(self._registry.values())

    def running(self, uuid: Uuid) -> list[TaInstance]:
        return self.backend.launcher.instances(uuid)

    def list_tas(self) -> list[dict]:
        return [{"uuid": str(e.manifest.uuid), "name": e.manifest.name,
                 "running": bool(self.running(e.manifest.uuid)),
                 "digest": e.installed_digest.hex()} for e in self.registry()]

    # -- sessions -----------------------------------------------------------

    def new_internal_context(self) -> int:
        return INTERNAL_CONTEXT_BIT | next(self._internal_ids)

    def session(self, session_id: int) -> SessionRecord | None:
        with self._lock:
            return self._sessions.get(session_id)

    def session_context(self, session_id: int) -> int | None:
        rec = self.session(session_id)
        return None if rec is None else rec.context_id

    def sessions(self) -> list[SessionRecord]:
        with self._lock:
            return list(self._sessions.values())

    def _record(self, uuid: Uuid, result: DispatchResult) -> DispatchResult:
        if result.trace:
            with self._lock:
                self._traces.setdefault(uuid, []).extend(result.trace)
        return result

    def _endpoint_factory(self, entry: TaRegistryEntry):
        return lambda: TaChannel(self, entry.manifest.uuid, entry.manifest.storage_quota)

    def _acquire_instance(self, entry: TaRegistryEntry) -> TaInstance | None:
        """Launch (and create) the TA if needed; the caller holds a pending slot."""
        m = entry.manifest
        with self._lock:
            inst, fresh = self.backend.load_ta(m.uuid, entry.image, self._endpoint_factory(entry),
                                               m.valid_digests, m.single_instance)
            self._pending[id(inst)] = self._pending.get(id(inst), 0) + 1
            if fresh:
                entry.ever_ran = True
                res = self._record(m.uuid, self.backend.create(inst))
                if res.code != ReturnCode.Success:
                    self._pending.pop(id(inst), None)
                    self.backend.launcher.forget(inst)
                    inst.shutdown()
                    return None
            return inst

    def _maybe_retire(self, inst: TaInstance) -> None:
        """Destroy an instance with no sessions and nobody about to open one."""
        with self._lock:
            if self._pending.get(id(inst), 0) or inst.sessions or not inst.alive:
                if not inst.alive:
                    self.backend.launcher.forget(inst)
                return
            self._pending.pop(id(inst), None)
            self._record(inst.uuid, self.backend.destroy(inst))

    def _release_pending(self, inst: TaInstance) -> None:
        with self._lock:
            n = self._pending.get(id(inst), 0) - 1
            if n > 0:
                self._pending[id(inst)] = n
            else:
                self._pending.pop(id(inst), None)

    def open_session(self, context_id: int, uuid: Uuid, operation: Operation | None = None):
        """Returns (SessionRecord or None, code, Operation)."""
        operation = operation or Operation()
        with self._lock:
            entry = self._registry.get(uuid)
            if entry is None:
                return None, ReturnCode.ErrorItemNotFound, operation
            inst = self._acquire_instance(entry)
            if inst is None:
                return None, ReturnCode.ErrorGeneric, operation
            rec = SessionRecord(next(self._session_ids), context_id, uuid, instance=inst)
            self._sessions[rec.session_id] = rec
        res = self._record(uuid, self.backend.open_session(inst, rec.session_id, operation))
        with self._lock:
            rec.state = SessionState.Open if res.code == ReturnCode.Success else SessionState.Closed
            self._release_pending(inst)
        if res.code == ReturnCode.ErrorTargetDead:
            self._instance_died(inst)
        if rec.state is SessionState.Closed:
            self._maybe_retire(inst)
            return None, res.code, res.operation
        return rec, res.code, res.operation

    def invoke_command(self, session_id: int, command_id: int, operation: Operation | None = None):
        operation = operation or Operation()
        with self._lock:
            rec = self._sessions.get(session_id)
            if rec is None or rec.state is not SessionState.Open:
                return ReturnCode.ErrorBadState, operation
            inst = rec.instance
        res = self._record(rec.uuid, self.backend.invoke(inst, session_id, command_id & 0xFFFFFFFF,
                                                         operation))
        if res.code == ReturnCode.ErrorTargetDead:
            self._instance_died(inst)
        return res.code, res.operation

    def close_session(self, session_id: int) -> int:
        with self._lock:
            rec = self._sessions.get(session_id)
            if rec is None or rec.state is not SessionState.Open:
                return ReturnCode.ErrorBadState
            rec.state = SessionState.Closed
            inst = rec.instance
        res = self._record(rec.uuid, self.backend.close_session(inst, session_id))
        if res.code == ReturnCode.ErrorTargetDead:
            self._instance_died(inst)
        self._maybe_retire(inst)
        return ReturnCode.Success

    def _instance_died(self, inst: TaInstance) -> None:
        with self._lock:
            for rec in self._sessions.values():
                if rec.instance is inst:
                    rec.state = SessionState.Closed
            self._pending.pop(id(inst), None)
            self.backend.launcher.forget(inst)

    def finalize_context(self, context_id: int) -> int:
        with self._lock:
            ids = [r.session_id for r in self._sessions.values()
                   if r.context_id == context_id and r.state is SessionState.Open]
        for sid in ids:
            self.close_session(sid)
        return ReturnCode.Success

    # -- services for TA channels ---------------------------------------------

    def _quota(self, owner: Uuid) -> int | None:
        entry = self._registry.get(owner)
        return entry.manifest.storage_quota if entry else None

    def storage_put(self, owner: Uuid, object_id: bytes, data: bytes, quota: int | None = None):
        self.store.put(owner, object_id, data, quota if quota is not None else self._quota(owner))

    def storage_get(self, owner: Uuid, object_id: bytes) -> bytes:
        return self.store.get(owner, object_id)

    def storage_delete(self, owner: Uuid, object_id: bytes) -> None:
        self.store.delete(owner, object_id)

    def get_time(self) -> int:
        with self._clock_lock:
            return next(self._clock)

    # -- introspection ----------------------------------------------------------

    def trace(self, uuid: Uuid) -> list:
        with self._lock:
            return list(self._traces.get(uuid, ()))

    def trace_text(self, uuid: Uuid) -> str:
        with self._lock:
            entry = self._registry.get(uuid)
            if entry is None:
                raise TeeError(ReturnCode.ErrorItemNotFound, "no such TA")
            if not entry.ever_ran:
                raise TeeError(ReturnCode.ErrorBadState, "TA has never run")
        return export_trace(self.trace(uuid))

    def status(self) -> dict:
        with self._lock:
            open_sessions = sum(r.state is SessionState.Open for r in self._sessions.values())
            return {"backend": self.backend.name, "tas": len(self._registry),
                    "sessions": open_sessions,
                    "instances": len(self.backend.launcher.instances()),
                    "engine": self.backend.engine.describe()}

    def close(self) -> None:
        for rec in self.sessions():
            if rec.state is SessionState.Open:
                self.close_session(rec.session_id)
        for inst in self.backend.launcher.instances():
            inst.shutdown()


__all__ = ["ManagerConfig", "Manager", "TaChannel", "TaRegistryEntry", "SessionRecord",
           "SessionState", "DigestMismatch", "DuplicateUuid", "ConfigError"]
