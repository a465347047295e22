import os
import secrets
import threading
from pathlib import Path

import pytest

from vtee import tas
from vtee.backends import make_backend
from vtee.core import (ReturnCode, StorageDeleteReq, StorageDeleteResp, StorageReadReq,
                       StorageReadResp, StorageWriteReq, StorageWriteResp, Uuid, compute_digest,
                       decode_frame, decode_message)
from vtee.manager import Manager, ManagerConfig
from vtee.runtime import make_image

GOLDEN = Path(__file__).parent / "golden"


def make_config(tmp_path, backend="sgx", **kw) -> ManagerConfig:
    return ManagerConfig(
        socket_path=str(short_socket_dir() / f"vtee-{secrets.token_hex(4)}.sock"),
        storage_dir=str(tmp_path / "store"),
        master_key=bytes(range(32)),
        backend=backend,
        **kw,
    )


def short_socket_dir() -> Path:
    # unix socket paths are limited to ~108 bytes; pytest tmp paths can exceed that
    d = Path("/tmp") / f"vtee-test-{os.getpid()}"
    d.mkdir(exist_ok=True)
    return d


@pytest.fixture
def config(tmp_path):
    return make_config(tmp_path)


@pytest.fixture(params=["sgx", "tytan"])
def backend_name(request):
    return request.param


@pytest.fixture
def manager(tmp_path, backend_name):
    m = Manager(make_config(tmp_path, backend_name))
    for manifest, image in tas.demo_packages().values():
        m.install_ta(manifest, image)
    yield m
    m.close()


@pytest.fixture
def sgx_manager(tmp_path):
    m = Manager(make_config(tmp_path, "sgx"))
    for manifest, image in tas.demo_packages().values():
        m.install_ta(manifest, image)
    yield m
    m.close()


class FakeEndpoint:
    """Stands in for the manager side of a TA channel."""

    def __init__(self):
        self.objects: dict[bytes, bytes] = {}
        self.clock = 0
        self.context_id = (1 << 63) | 7
        self.seen = []
        self.lock = threading.Lock()

    def get_time(self) -> int:
        with self.lock:
            self.clock += 1
            return self.clock

    def exchange(self, raw: bytes) -> bytes:
        msg = decode_message(decode_frame(raw))
        self.seen.append(msg)
        rid = msg.request_id
        if isinstance(msg, StorageReadReq):
            if msg.object_id not in self.objects:
                return StorageReadResp(rid, ReturnCode.ErrorItemNotFound, b"").encode()
            return StorageReadResp(rid, ReturnCode.Success, self.objects[msg.object_id]).encode()
        if isinstance(msg, StorageWriteReq):
            self.objects[msg.object_id] = msg.data
            return StorageWriteResp(rid, ReturnCode.Success).encode()
        if isinstance(msg, StorageDeleteReq):
            code = (ReturnCode.Success if self.objects.pop(msg.object_id, None) is not None
                    else ReturnCode.ErrorItemNotFound)
            return StorageDeleteResp(rid, code).encode()
        raise AssertionError(f"unexpected {msg!r}")


def launch_logic(backend_kind: str, logic: str, endpoint=None, page_size=4096):
    """(backend, instance, endpoint) for a registered TA logic name."""
    backend = make_backend(backend_kind, page_size=page_size)
    endpoint = endpoint or FakeEndpoint()
    image = make_image(logic, secrets.token_bytes(8))
    uuid = Uuid(secrets.token_bytes(16))
    inst, fresh = backend.load_ta(uuid, image, lambda: endpoint, {compute_digest(image)})
    assert fresh
    return backend, inst, endpoint
