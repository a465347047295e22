import random

import pytest

from vtee.backends import (CoreMsg, SgxEngine, TytanEngine, decode_core_msg, decode_entry,
                           decode_outcome, decode_service, encode_core_msg, encode_entry,
                           encode_outcome, encode_service, make_backend)
from vtee.core import (MemrefIn, Operation, ReturnCode, TeeError, Uuid, ValueInOut,
                       compute_digest)
from vtee.eampu import TaskKind
from vtee.runtime import (Entry, EntryRequest, GetTime, InvokeTa, ProxyOutcome, StorageDelete,
                          StorageRead, StorageWrite, make_image)

U = Uuid(bytes(range(16)))
OP = Operation((ValueInOut(3, 4), MemrefIn(b"abc")) + Operation().params[2:])


def test_make_backend():
    assert isinstance(make_backend("sgx").engine, SgxEngine)
    assert isinstance(make_backend("tytan").engine, TytanEngine)
    with pytest.raises(ValueError):
        make_backend("trustzone")


@pytest.mark.parametrize("request_", [
    StorageRead(b"id"), StorageWrite(b"id", b"data"), StorageDelete(b""), GetTime(),
    InvokeTa(U, 7, OP),
])
def test_service_codec(request_):
    kind, r = decode_core_msg(encode_service(request_))
    assert kind is CoreMsg.SERVICE_REQ
    assert decode_service(r) == request_


@pytest.mark.parametrize("request_,value", [
    (StorageRead(b"x"), b"payload"), (GetTime(), 99), (InvokeTa(U, 1, OP), (0x1234, OP)),
    (StorageWrite(b"x", b""), None),
])
def test_outcome_codec(request_, value):
    for outcome in (ProxyOutcome(ReturnCode.Success, value),
                    ProxyOutcome(ReturnCode.ErrorItemNotFound)):
        kind, r = decode_core_msg(encode_outcome(request_, outcome))
        assert kind is CoreMsg.SERVICE_RESP
        assert decode_outcome(request_, r) == outcome


def test_entry_codec():
    for entry in Entry:
        req = EntryRequest(entry, 5, 9, OP)
        kind, r = decode_core_msg(encode_entry(req))
        assert kind is CoreMsg.ENTRY and decode_entry(r) == req
    with pytest.raises(ValueError):
        decode_core_msg(b"")


def test_core_task_loaded_first():
    e = TytanEngine()
    assert e.core_task < e.os_task
    core = e.platform.task(e.core_task)
    assert core.kind is TaskKind.Secure and core.name == "tee-core"
    assert e.platform.current == e.os_task


def test_normal_task_refused_by_core():
    e = TytanEngine()
    ca = e.load_normal_task(b"rogue client")
    for payload in (encode_service(GetTime()), encode_service(StorageRead(b"k")),
                    encode_core_msg(CoreMsg.REGISTER, U.bytes), b"", b"\xff\x00"):
        kind, r = decode_core_msg(e.raw_core_request(ca, payload))
        assert kind is CoreMsg.DENIED and r.u32() == ReturnCode.ErrorAccessDenied
    assert e.denials == 5


def test_unregistered_secure_task_refused():
    e = TytanEngine()
    t = e.load_secure_task(b"never registered")
    kind, r = decode_core_msg(e.raw_core_request(t, encode_service(GetTime())))
    assert kind is CoreMsg.DENIED and r.u32() == ReturnCode.ErrorAccessDenied


def test_registered_task_accepted():
    e = TytanEngine()
    image = make_image("echo", b"1")
    h = e.create(U, image, {compute_digest(image)})
    assert e.registered[h.task] == (U, compute_digest(image))
    kind, _ = decode_core_msg(e.raw_core_request(h.task, encode_service(GetTime())))
    assert kind is CoreMsg.SERVICE_RESP
    # an accepted message that is not a service request is answered, not denied for access
    kind, r = decode_core_msg(e.raw_core_request(h.task, b"\x05\xee"))
    assert kind is CoreMsg.DENIED and r.u32() == ReturnCode.ErrorBadParameters


def test_core_sees_platform_digest(monkeypatch):
    e = TytanEngine()
    seen = []
    recv = e.platform.ipc_recv

    def spy(tid):
        env = recv(tid)
        if tid == e.core_task:
            seen.append(env)
        return env

    monkeypatch.setattr(e.platform, "ipc_recv", spy)
    image = make_image("echo", b"2")
    h = e.create(U, image)
    mine = [env for env in seen if env.sender_id == h.task]
    assert mine and all(env.sender_digest == compute_digest(image) for env in mine)


@pytest.mark.parametrize("kind", ["sgx", "tytan"])
def test_measurement_binding(kind):
    engine = make_backend(kind).engine
    image = make_image("echo")
    with pytest.raises(TeeError) as e:
        engine.create(U, image, {compute_digest(b"other")})
    assert e.value.code == ReturnCode.ErrorSecurity
    engine.create(U, image, {compute_digest(image)})


def test_tytan_failed_create_leaves_no_task():
    e = TytanEngine()
    before = set(e.platform.tasks)
    with pytest.raises(TeeError):
        e.create(U, make_image("echo"), {bytes(32)})
    assert set(e.platform.tasks) == before


def test_tytan_release_unloads():
    e = TytanEngine()
    h = e.create(U, make_image("echo"))
    e.release(h)
    assert h.task not in e.platform.tasks and h.task not in e.registered


def test_sgx_enclaves_get_separate_ranges():
    e = SgxEngine(page_size=64)
    hs = [e.create(Uuid(bytes([i]) * 16), make_image("echo", bytes([i]) * 100)) for i in range(4)]
    spans = sorted((e.machine.enclaves[h.enclave].base, e.machine.enclaves[h.enclave].end)
                   for h in hs)
    assert all(a_end <= b_start for (_, a_end), (b_start, _) in zip(spans, spans[1:]))
    e.release(hs[0])
    assert hs[0].enclave not in e.machine.enclaves


@pytest.mark.parametrize("kind", ["sgx", "tytan"])
def test_heap_bounds(kind):
    engine = make_backend(kind).engine
    h = engine.create(U, make_image("echo"))
    with pytest.raises(TeeError) as e:
        engine.mem_read(h, h.heap_size - 1, 2)
    assert e.value.code == ReturnCode.ErrorBadParameters


def test_random_normal_tasks_always_denied():
    rng = random.Random(4)
    e = TytanEngine()
    tasks = len(e.platform.tasks)
    for i in range(30):
        tid = e.load_normal_task(rng.randbytes(16), name=f"n{i}")
        payload = rng.choice([encode_service(GetTime()), rng.randbytes(rng.randrange(1, 40))])
        kind, r = decode_core_msg(e.raw_core_request(tid, payload))
        assert kind is CoreMsg.DENIED and r.u32() == ReturnCode.ErrorAccessDenied
        e.unload_task(tid)
    assert len(e.platform.tasks) == tasks
