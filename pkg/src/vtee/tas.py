"""Demo trusted applications shipped with the daemon.

Each TA is a :class:`TrustedApp` registered under a logic name; an image
names its logic in the header line, so the packaged image files are what
the manager measures and binds to a UUID.
"""
from __future__ import annotations

import struct
from importlib import resources

from .core import (MemrefIn, MemrefInOut, MemrefOut, Operation, ReturnCode,
                   TaManifest, TeeError, Uuid, ValueIn, ValueInOut, ValueOut, compute_digest,
                   parse_uuid)
from .runtime import ProxyUnavailable, TrustedApp, make_image, register_logic

ECHO_UUID = parse_uuid("7ee00000-0000-4000-8000-000000000001")
DOUBLER_UUID = parse_uuid("7ee00000-0000-4000-8000-000000000002")
COUNTER_UUID = parse_uuid("7ee00000-0000-4000-8000-000000000003")
STORAGE_UUID = parse_uuid("7ee00000-0000-4000-8000-000000000004")
RELAY_UUID = parse_uuid("7ee00000-0000-4000-8000-000000000005")
PROBE_UUID = parse_uuid("7ee00000-0000-4000-8000-000000000006")

CMD_ECHO = 1
CMD_DOUBLE = 1
CMD_INCREMENT, CMD_GET, CMD_TIME = 1, 2, 3
CMD_PUT, CMD_READ, CMD_DELETE = 1, 2, 3
CMD_RELAY = 1
CMD_PROBE_TIME, CMD_PROBE_ROUNDTRIP, CMD_PROBE_PANIC, CMD_PROBE_MEMORY = 1, 2, 3, 4

DEFAULT_OBJECT = b"default"
WORD32 = 0xFFFFFFFF


def _object_id(params) -> bytes:
    p = params[1]
    return bytes(p.data) if isinstance(p, MemrefIn) else DEFAULT_OBJECT


@register_logic("echo")
class EchoTa(TrustedApp):
    """Identity on a MemrefInOut, or copies a MemrefIn into a MemrefOut."""

    def invoke_command(self, svc, session, command_id, params):
        if command_id != CMD_ECHO:
            return ReturnCode.ErrorBadParameters
        p0, p1 = params[0], params[1]
        if isinstance(p0, MemrefInOut):
            return ReturnCode.Success
        if isinstance(p0, MemrefIn) and isinstance(p1, MemrefOut):
            params[1] = p1.filled(p0.data)
            return ReturnCode.Success
        return ReturnCode.ErrorBadParameters


@register_logic("doubler")
class DoublerTa(TrustedApp):
    def invoke_command(self, svc, session, command_id, params):
        p = params[0]
        if command_id != CMD_DOUBLE or not isinstance(p, ValueInOut):
            return ReturnCode.ErrorBadParameters
        params[0] = ValueInOut((p.a * 2) & WORD32, (p.b * 2) & WORD32)
        return ReturnCode.Success


@register_logic("secure-counter")
class SecureCounterTa(TrustedApp):
    """Keeps its counter in TA-private memory, not in a Python attribute."""

    def _load(self, svc) -> int:
        return struct.unpack("<I", svc.mem_read(0, 4))[0]

    def invoke_command(self, svc, session, command_id, params):
        if command_id == CMD_INCREMENT:
            n = (self._load(svc) + 1) & WORD32
            svc.mem_write(0, struct.pack("<I", n))
            params[0] = ValueOut(n, 0)
        elif command_id == CMD_GET:
            params[0] = ValueOut(self._load(svc), 0)
        elif command_id == CMD_TIME:
            t = svc.get_time()
            params[0] = ValueOut(t & WORD32, t >> 32)
        else:
            return ReturnCode.ErrorBadParameters
        if not isinstance(params[0], ValueOut):
            return ReturnCode.ErrorBadParameters
        return ReturnCode.Success


@register_logic("storage")
class StorageTa(TrustedApp):
    """PUT param0 data, READ into param0, DELETE; param1 optionally names the object."""

    def invoke_command(self, svc, session, command_id, params):
        oid = _object_id(params)
        p0 = params[0]
        if command_id == CMD_PUT:
            if not isinstance(p0, (MemrefIn, MemrefInOut)):
                return ReturnCode.ErrorBadParameters
            svc.storage_write(oid, p0.data)
        elif command_id == CMD_READ:
            if not isinstance(p0, (MemrefOut, MemrefInOut)):
                return ReturnCode.ErrorBadParameters
            params[0] = p0.filled(svc.storage_read(oid))
        elif command_id == CMD_DELETE:
            svc.storage_delete(oid)
        else:
            return ReturnCode.ErrorBadParameters
        return ReturnCode.Success


@register_logic("relay")
class RelayTa(TrustedApp):
    """Acts as a client of the echo TA through the Internal Client API."""

    def invoke_command(self, svc, session, command_id, params):
        p0 = params[0]
        if command_id != CMD_RELAY or not isinstance(p0, MemrefInOut):
            return ReturnCode.ErrorBadParameters
        target = ECHO_UUID
        if isinstance(params[1], MemrefIn) and len(params[1].data) == 16:
            target = Uuid(bytes(params[1].data))
        code, op = svc.invoke_ta(target, CMD_ECHO, Operation.of(p0))
        if code == ReturnCode.Success:
            params[0] = p0.filled(op[0].data)
        return code


@register_logic("probe")
class ProbeTa(TrustedApp):
    """Every hook makes exactly one proxied call, so traces show the mapping.

    Open takes an optional ValueIn whose ``a`` overrides the call count.
    """

    def _try_once(self, svc):
        try:
            svc.get_time()
        except ProxyUnavailable:
            pass

    def create(self, svc):
        self._try_once(svc)

    def destroy(self, svc):
        self._try_once(svc)

    def open_session(self, svc, session, params):
        k = params[0].a if isinstance(params[0], ValueIn) else 1
        for _ in range(k):
            svc.get_time()
        return ReturnCode.Success

    def close_session(self, svc, session):
        svc.get_time()

    def invoke_command(self, svc, session, command_id, params):
        if command_id == CMD_PROBE_TIME:
            k = params[0].a if isinstance(params[0], ValueIn) else 1
            last = 0
            for _ in range(k):
                last = svc.get_time()
            if isinstance(params[1], ValueOut):
                params[1] = ValueOut(last & WORD32, last >> 32)
            return ReturnCode.Success
        if command_id == CMD_PROBE_ROUNDTRIP:
            data = params[0].data if isinstance(params[0], MemrefIn) else b"probe"
            svc.storage_write(b"probe", data)
            back = svc.storage_read(b"probe")
            if isinstance(params[1], MemrefOut):
                params[1] = params[1].filled(back)
            return ReturnCode.Success if back == data else ReturnCode.ErrorGeneric
        if command_id == CMD_PROBE_PANIC:
            raise RuntimeError("probe TA panic")
        if command_id == CMD_PROBE_MEMORY:
            p = params[0]
            if not isinstance(p, ValueInOut):
                return ReturnCode.ErrorBadParameters
            svc.mem_write(0, struct.pack("<I", p.a))
            svc.get_time()
            (back,) = struct.unpack("<I", svc.mem_read(0, 4))
            params[0] = ValueInOut(back, p.b)
            return ReturnCode.Success
        raise TeeError(ReturnCode.ErrorBadParameters, "unknown probe command")


DEMO_TAS = {
    "echo": (ECHO_UUID, "echo", True),
    "doubler": (DOUBLER_UUID, "doubler", True),
    "secure-counter": (COUNTER_UUID, "secure-counter", True),
    "storage": (STORAGE_UUID, "storage", True),
    "relay": (RELAY_UUID, "relay", True),
    "probe": (PROBE_UUID, "probe", True),
}
PACKAGE_DIR = "data/tas"


def build_image(name: str) -> bytes:
    _, logic, _ = DEMO_TAS[name]
    return make_image(logic, f"demo TA {name} v1\n".encode())


def build_package(name: str) -> tuple[TaManifest, bytes]:
    uuid, _, single = DEMO_TAS[name]
    image = build_image(name)
    return TaManifest(uuid, name, frozenset({compute_digest(image)}), single), image


def package_files(name: str):
    """(manifest path, image path) of a shipped demo TA package."""
    base = resources.files("vtee").joinpath(PACKAGE_DIR)
    return base.joinpath(f"{name}.manifest"), base.joinpath(f"{name}.img")


def load_package(name: str) -> tuple[TaManifest, bytes]:
    manifest, image = package_files(name)
    return TaManifest.parse(manifest.read_text()), image.read_bytes()


def demo_packages() -> dict[str, tuple[TaManifest, bytes]]:
    return {name: load_package(name) for name in DEMO_TAS}


__all__ = ["DEMO_TAS", "demo_packages", "load_package", "build_package", "package_files"]
