import hashlib
import os
import random
import struct

import pytest
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from hypothesis import given, settings
from hypothesis import strategies as st

from vtee.core import MAX_OBJECT_ID, ReturnCode, TeeError, Uuid
from vtee.storage import (MAGIC, NONCE_SIZE, TAG_SIZE, QuotaExceeded, SealedStore,
                          StorageUnavailable, derive_ta_key, hkdf_sha256, object_filename,
                          parse_header, seal, unseal)

MASTER = bytes(range(32))
A = Uuid(bytes([0xA] * 16))
B = Uuid(bytes([0xB] * 16))


def oracle_key(master: bytes, uuid: Uuid) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None,
                info=b"vtee-storage" + uuid.bytes).derive(master)


@pytest.fixture
def store(tmp_path):
    return SealedStore(tmp_path / "store", MASTER)


def test_rfc5869_case_1():
    ikm = bytes([0x0B] * 22)
    salt = bytes(range(13))
    info = bytes(range(0xF0, 0xFA))
    okm = hkdf_sha256(ikm, info, 42, salt)
    assert okm.hex() == ("3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf"
                         "34007208d5b887185865")


def test_key_derivation_matches_library_hkdf():
    rng = random.Random(1)
    for _ in range(100):
        master, uuid = rng.randbytes(32), Uuid(rng.randbytes(16))
        assert derive_ta_key(master, uuid) == oracle_key(master, uuid)


def test_key_derivation_properties():
    assert derive_ta_key(MASTER, A) == derive_ta_key(MASTER, A)
    rng = random.Random(2)
    keys = {derive_ta_key(MASTER, Uuid(rng.randbytes(16))) for _ in range(100)}
    assert len(keys) == 100
    for _ in range(100):
        m = rng.randbytes(32)
        assert derive_ta_key(m, A) != m
    with pytest.raises(ValueError):
        derive_ta_key(b"short", A)


def test_record_layout(store):
    store.put(A, b"obj", b"payload")
    path = store.path_for(A, b"obj")
    assert path.name == object_filename(A, b"obj")
    assert path.name == hashlib.sha256(A.bytes + b"\x00" + b"obj").hexdigest()
    blob = path.read_bytes()
    assert blob[:4] == MAGIC and blob[4] == 1
    assert blob[5:21] == A.bytes
    assert struct.unpack_from("<H", blob, 21)[0] == 3
    assert blob[23:26] == b"obj"
    assert len(blob) == 26 + NONCE_SIZE + len(b"payload") + TAG_SIZE
    assert parse_header(blob) == (A, b"obj", 7)


def test_round_trip_and_fresh_nonce(store):
    store.put(A, b"k", b"v1")
    first = store.path_for(A, b"k").read_bytes()
    store.put(A, b"k", b"v1")
    second = store.path_for(A, b"k").read_bytes()
    assert first != second
    assert store.get(A, b"k") == b"v1"


@settings(max_examples=50, deadline=None)
@given(st.binary(max_size=MAX_OBJECT_ID), st.binary(max_size=2048))
def test_round_trip_property(tmp_path_factory, object_id, data):
    s = SealedStore(tmp_path_factory.mktemp("s"), MASTER)
    s.put(A, object_id, data)
    assert s.get(A, object_id) == data


def test_missing_and_delete(store):
    with pytest.raises(TeeError) as e:
        store.get(A, b"nope")
    assert e.value.code == ReturnCode.ErrorItemNotFound
    store.put(A, b"x", b"1")
    store.delete(A, b"x")
    with pytest.raises(TeeError) as e:
        store.get(A, b"x")
    assert e.value.code == ReturnCode.ErrorItemNotFound
    with pytest.raises(TeeError) as e:
        store.delete(A, b"x")
    assert e.value.code == ReturnCode.ErrorItemNotFound
    assert store.objects(A) == []


def test_namespacing(store):
    store.put(A, b"secret", b"for A")
    with pytest.raises(TeeError) as e:
        store.get(B, b"secret")
    assert e.value.code == ReturnCode.ErrorItemNotFound


def test_moved_blob_fails_authentication(store):
    store.put(A, b"secret", b"for A")
    os.replace(store.path_for(A, b"secret"), store.path_for(B, b"secret"))
    with pytest.raises(TeeError) as e:
        store.get(B, b"secret")
    assert e.value.code == ReturnCode.ErrorSecurity


def test_every_byte_tamper_detected(store):
    store.put(A, b"obj", b"sensitive data")
    path = store.path_for(A, b"obj")
    clean = path.read_bytes()
    for i in range(len(clean)):
        bad = bytearray(clean)
        bad[i] ^= 0x01
        path.write_bytes(bytes(bad))
        with pytest.raises(TeeError) as e:
            store.get(A, b"obj")
        assert e.value.code == ReturnCode.ErrorSecurity
    path.write_bytes(clean[:-1])
    with pytest.raises(TeeError):
        store.get(A, b"obj")


def test_unseal_with_other_key():
    blob = seal(derive_ta_key(MASTER, A), A, b"o", b"data")
    with pytest.raises(TeeError) as e:
        unseal(derive_ta_key(MASTER, B), A, b"o", blob)
    assert e.value.code == ReturnCode.ErrorSecurity


def test_ciphertext_hides_plaintext(store):
    rng = random.Random(3)
    plain = rng.randbytes(1024)
    store.put(A, b"big", plain)
    blob = store.path_for(A, b"big").read_bytes()
    assert not any(plain[i:i + 8] in blob for i in range(len(plain) - 7))


def test_quota(store):
    store.put(A, b"a", b"x" * 60, quota=100)
    with pytest.raises(QuotaExceeded) as e:
        store.put(A, b"b", b"x" * 41, quota=100)
    assert e.value.code == ReturnCode.ErrorOutOfMemory
    store.put(A, b"b", b"x" * 40, quota=100)
    # overwriting replaces the old object's share of the quota
    store.put(A, b"a", b"x" * 60, quota=100)
    assert store.usage(A) == 100
    store.put(B, b"a", b"x" * 100, quota=100)


def test_object_id_limit(store):
    store.put(A, b"i" * MAX_OBJECT_ID, b"")
    with pytest.raises(TeeError) as e:
        store.put(A, b"i" * (MAX_OBJECT_ID + 1), b"")
    assert e.value.code == ReturnCode.ErrorBadParameters


def test_index_survives_restart(tmp_path):
    s = SealedStore(tmp_path, MASTER)
    s.put(A, b"one", b"12345")
    s.put(B, b"two", b"12")
    again = SealedStore(tmp_path, MASTER)
    assert again.usage(A) == 5 and again.objects(B) == [b"two"]
    assert again.get(A, b"one") == b"12345"


def test_wrong_master_cannot_read(tmp_path):
    SealedStore(tmp_path, MASTER).put(A, b"o", b"d")
    with pytest.raises(TeeError) as e:
        SealedStore(tmp_path, bytes(32)).get(A, b"o")
    assert e.value.code == ReturnCode.ErrorSecurity


def test_unwritable_root(tmp_path):
    f = tmp_path / "file"
    f.write_text("")
    with pytest.raises(StorageUnavailable):
        SealedStore(f / "sub", MASTER)
    with pytest.raises(ValueError):
        SealedStore(tmp_path, b"short")
