"""Socket front end of the manager.

Client applications speak length-prefixed frames on ``socket_path``. Each
connection carries the contexts it announced; a disconnect finalizes them.
Operators use the HTTP admin API on ``socket_path + ".admin"``.
"""
from __future__ import annotations

import logging
import os
import socket
import socketserver
import threading

from .core import (CloseSessionReq, CloseSessionResp, FinalizeCtx, FrameError, InvokeReq,
                   InvokeResp, MsgType, OpenSessionReq, OpenSessionResp, ReturnCode,
                   StorageDeleteReq, StorageDeleteResp, StorageReadReq, StorageReadResp,
                   StorageWriteReq, StorageWriteResp, TeeError, TraceDumpReq, TraceDumpResp,
                   decode_message, read_frame)
from .manager import Manager, ManagerConfig

log = logging.getLogger(__name__)

ADMIN_SUFFIX = ".admin"


class AddressInUse(OSError):
    pass


def admin_path(socket_path: str) -> str:
    return socket_path + ADMIN_SUFFIX


def _socket_live(path: str) -> bool:
    s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    try:
        s.connect(path)
        return True
    except OSError:
        return False
    finally:
        s.close()


def claim_socket(path: str) -> None:
    """Raise AddressInUse if a server answers on ``path``; drop a stale file."""
    if os.path.exists(path):
        if _socket_live(path):
            raise AddressInUse(f"{path} is in use")
        os.unlink(path)


class _Handler(socketserver.BaseRequestHandler):
    server: "_FrameServer"

    def handle(self):
        manager = self.server.manager
        contexts: set[int] = set()
        sock = self.request
        try:
            while True:
                try:
                    frame = read_frame(sock)
                except FrameError as exc:
                    log.warning("dropping connection: %s", exc)
                    break
                if frame is None:
                    break
                if not frame.known:
                    log.warning("unknown msg_type 0x%02x; closing", int(frame.msg_type))
                    break
                try:
                    msg = decode_message(frame)
                except (FrameError, ValueError, TypeError) as exc:
                    log.warning("malformed %s: %s", MsgType(frame.msg_type).name, exc)
                    break
                reply = respond(manager, msg, contexts)
                sock.sendall(reply.encode())
        except OSError:
            pass
        finally:
            for ctx in contexts:
                manager.finalize_context(ctx)


def respond(manager: Manager, msg, contexts: set):
    """Answer one client frame. Storage is for TA channels only."""
    rid = msg.request_id
    if isinstance(msg, OpenSessionReq):
        contexts.add(msg.context_id)
        rec, code, op = manager.open_session(msg.context_id, msg.uuid, msg.operation)
        return OpenSessionResp(rid, code, rec.session_id if rec else 0, op)
    if isinstance(msg, InvokeReq):
        if manager.session_context(msg.session_id) not in contexts:
            return InvokeResp(rid, ReturnCode.ErrorBadState, msg.operation)
        code, op = manager.invoke_command(msg.session_id, msg.command_id, msg.operation)
        return InvokeResp(rid, code, op)
    if isinstance(msg, CloseSessionReq):
        if manager.session_context(msg.session_id) not in contexts:
            return CloseSessionResp(rid, ReturnCode.ErrorBadState)
        return CloseSessionResp(rid, manager.close_session(msg.session_id))
    if isinstance(msg, FinalizeCtx):
        code = manager.finalize_context(msg.context_id)
        contexts.discard(msg.context_id)
        return CloseSessionResp(rid, code)
    if isinstance(msg, TraceDumpReq):
        try:
            return TraceDumpResp(rid, ReturnCode.Success, manager.trace_text(msg.uuid).encode())
        except TeeError as exc:
            return TraceDumpResp(rid, exc.code, str(exc).encode())
    if isinstance(msg, StorageReadReq):
        return StorageReadResp(rid, ReturnCode.ErrorAccessDenied, b"")
    if isinstance(msg, StorageWriteReq):
        return StorageWriteResp(rid, ReturnCode.ErrorAccessDenied)
    if isinstance(msg, StorageDeleteReq):
        return StorageDeleteResp(rid, ReturnCode.ErrorAccessDenied)
    # responses sent by a client make no sense; answer with a generic close ack
    return CloseSessionResp(rid, ReturnCode.ErrorBadParameters)


class _FrameServer(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    daemon_threads = True
    allow_reuse_address = False

    def __init__(self, path: str, manager: Manager):
        self.manager = manager
        super().__init__(path, _Handler)


class Daemon:
    """A running manager with its frame server (and optionally the admin API)."""

    def __init__(self, config: ManagerConfig, manager: Manager, server: _FrameServer):
        self.config = config
        self.manager = manager
        self._server = server
        self._thread = threading.Thread(target=server.serve_forever, args=(0.05,),
                                        name="vtee-frames", daemon=True)
        self._admin = None
        self._admin_thread = None
        self.stopped = threading.Event()

    @property
    def socket_path(self) -> str:
        return self.config.socket_path

    def serve_admin(self) -> None:
        import uvicorn

        from .service import create_app

        path = admin_path(self.socket_path)
        claim_socket(path)
        cfg = uvicorn.Config(create_app(self), uds=path, log_level="warning",
                             lifespan="off")
        self._admin = uvicorn.Server(cfg)
        self._admin_thread = threading.Thread(target=self._admin.run, name="vtee-admin",
                                              daemon=True)
        self._admin_thread.start()
        while not self._admin.started and self._admin_thread.is_alive():
            self.stopped.wait(0.01)

    def stop(self) -> None:
        if self.stopped.is_set():
            return
        self.stopped.set()
        self._server.shutdown()
        self._server.server_close()
        if self._admin is not None:
            self._admin.should_exit = True
        self.manager.close()
        for p in (self.socket_path, admin_path(self.socket_path)):
            try:
                os.unlink(p)
            except FileNotFoundError:
                pass

    def wait(self) -> None:
        self.stopped.wait()
        if self._admin_thread is not None:
            self._admin_thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def start(config: ManagerConfig, admin: bool = False, manager: Manager | None = None) -> Daemon:
    """Bind the frame socket and serve in background threads."""
    claim_socket(config.socket_path)
    manager = manager or Manager(config)
    try:
        server = _FrameServer(config.socket_path, manager)
    except OSError as exc:
        raise AddressInUse(f"cannot bind {config.socket_path}: {exc}") from None
    d = Daemon(config, manager, server)
    d._thread.start()
    if admin:
        d.serve_admin()
    return d
