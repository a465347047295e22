"""Sealed per-TA object storage.

Each object is one file named ``hex(SHA-256(uuid || 0x00 || object_id))``::

    "VTEE" | 0x01 | uuid(16) | len(object_id) u16le | object_id | nonce(12) | AES-GCM ct+tag

The header up to the nonce is bound as associated data, so moving or renaming
a blob, or editing its header, fails authentication just like editing the
ciphertext does.
"""
from __future__ import annotations

import hashlib
import hmac
import os
import struct
import tempfile
import threading
from collections import defaultdict
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .core import MAX_OBJECT_ID, ReturnCode, TeeError, Uuid

MAGIC = b"VTEE"
VERSION = 1
NONCE_SIZE = 12
TAG_SIZE = 16
KEY_INFO = b"vtee-storage"


class QuotaExceeded(TeeError):
    def __init__(self, message="storage quota exceeded"):
        super().__init__(ReturnCode.ErrorOutOfMemory, message)


class StorageUnavailable(TeeError):
    def __init__(self, message="storage unavailable"):
        super().__init__(ReturnCode.ErrorGeneric, message)


def hkdf_sha256(ikm: bytes, info: bytes, length: int = 32, salt: bytes = b"") -> bytes:
    """RFC 5869 extract-then-expand."""
    prk = hmac.new(salt or bytes(32), ikm, hashlib.sha256).digest()
    out, block, counter = b"", b"", 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([counter]), hashlib.sha256).digest()
        out += block
        counter += 1
    return out[:length]


def derive_ta_key(master: bytes, uuid: Uuid) -> bytes:
    if len(master) != 32:
        raise ValueError("master key must be 32 octets")
    return hkdf_sha256(master, KEY_INFO + uuid.bytes)


def object_filename(owner: Uuid, object_id: bytes) -> str:
    return hashlib.sha256(owner.bytes + b"\x00" + object_id).hexdigest()


def _header(owner: Uuid, object_id: bytes) -> bytes:
    return MAGIC + bytes([VERSION]) + owner.bytes + struct.pack("<H", len(object_id)) + object_id


def seal(key: bytes, owner: Uuid, object_id: bytes, data: bytes) -> bytes:
    header = _header(owner, object_id)
    nonce = os.urandom(NONCE_SIZE)
    return header + nonce + AESGCM(key).encrypt(nonce, bytes(data), header)


def unseal(key: bytes, owner: Uuid, object_id: bytes, blob: bytes) -> bytes:
    header = _header(owner, object_id)
    if not blob.startswith(header) or len(blob) < len(header) + NONCE_SIZE + TAG_SIZE:
        raise TeeError(ReturnCode.ErrorSecurity, "storage record header does not match")
    nonce = blob[len(header):len(header) + NONCE_SIZE]
    try:
        return AESGCM(key).decrypt(nonce, blob[len(header) + NONCE_SIZE:], header)
    except InvalidTag:
        raise TeeError(ReturnCode.ErrorSecurity, "storage record failed authentication") from None


def parse_header(blob: bytes) -> tuple[Uuid, bytes, int]:
    """(owner, object_id, plaintext size) without decrypting."""
    if blob[:4] != MAGIC or len(blob) < 23 or blob[4] != VERSION:
        raise ValueError("not a storage record")
    owner = Uuid(blob[5:21])
    (n,) = struct.unpack_from("<H", blob, 21)
    object_id = blob[23:23 + n]
    size = len(blob) - 23 - n - NONCE_SIZE - TAG_SIZE
    if len(object_id) != n or size < 0:
        raise ValueError("truncated storage record")
    return owner, object_id, size


class SealedStore:
    """Authenticated-encrypted objects, namespaced by owner UUID."""

    def __init__(self, root: str | os.PathLike, master_key: bytes):
        if len(master_key) != 32:
            raise ValueError("master key must be 32 octets")
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            probe = tempfile.NamedTemporaryFile(dir=self.root, prefix=".probe-")
            probe.close()
        except OSError as exc:
            raise StorageUnavailable(f"storage dir {self.root} not writable: {exc}") from None
        self._master = master_key
        self._keys: dict[Uuid, bytes] = {}
        self._sizes: dict[Uuid, dict[bytes, int]] = defaultdict(dict)
        self._locks: dict[Uuid, threading.Lock] = defaultdict(threading.Lock)
        self._guard = threading.Lock()
        self._scan()

    def _scan(self) -> None:
        for path in self.root.iterdir():
            if path.name.startswith(".") or not path.is_file():
                continue
            try:
                owner, object_id, size = parse_header(path.read_bytes())
            except (OSError, ValueError):
                continue
            if path.name == object_filename(owner, object_id):
                self._sizes[owner][object_id] = size

    def _lock(self, owner: Uuid) -> threading.Lock:
        with self._guard:
            return self._locks[owner]

    def _key(self, owner: Uuid) -> bytes:
        with self._guard:
            key = self._keys.get(owner)
            if key is None:
                key = self._keys[owner] = derive_ta_key(self._master, owner)
            return key

    def path_for(self, owner: Uuid, object_id: bytes) -> Path:
        return self.root / object_filename(owner, object_id)

    @staticmethod
    def _check_id(object_id: bytes) -> None:
        if len(object_id) > MAX_OBJECT_ID:
            raise TeeError(ReturnCode.ErrorBadParameters,
                           f"object id longer than {MAX_OBJECT_ID} octets")

    def usage(self, owner: Uuid) -> int:
        with self._lock(owner):
            return sum(self._sizes[owner].values())

    def objects(self, owner: Uuid) -> list[bytes]:
        with self._lock(owner):
            return sorted(self._sizes[owner])

    def put(self, owner: Uuid, object_id: bytes, data: bytes, quota: int | None = None) -> None:
        self._check_id(object_id)
        with self._lock(owner):
            sizes = self._sizes[owner]
            if quota is not None:
                used = sum(sizes.values()) - sizes.get(object_id, 0)
                if used + len(data) > quota:
                    raise QuotaExceeded(
                        f"{used} + {len(data)} octets exceeds quota of {quota}")
            blob = seal(self._key(owner), owner, object_id, data)
            path = self.path_for(owner, object_id)
            try:
                fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
                with os.fdopen(fd, "wb") as fh:
                    fh.write(blob)
                os.replace(tmp, path)
            except OSError as exc:
                raise StorageUnavailable(f"cannot write {path.name}: {exc}") from None
            sizes[object_id] = len(data)

    def get(self, owner: Uuid, object_id: bytes) -> bytes:
        self._check_id(object_id)
        with self._lock(owner):
            path = self.path_for(owner, object_id)
            try:
                blob = path.read_bytes()
            except FileNotFoundError:
                raise TeeError(ReturnCode.ErrorItemNotFound, "no such object") from None
            except OSError as exc:
                raise StorageUnavailable(f"cannot read {path.name}: {exc}") from None
            return unseal(self._key(owner), owner, object_id, blob)

    def delete(self, owner: Uuid, object_id: bytes) -> None:
        self._check_id(object_id)
        with self._lock(owner):
            try:
                self.path_for(owner, object_id).unlink()
            except FileNotFoundError:
                raise TeeError(ReturnCode.ErrorItemNotFound, "no such object") from None
            self._sizes[owner].pop(object_id, None)
