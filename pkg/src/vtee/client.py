"""Client API for REE applications: contexts, sessions, command invocation.

Calls are synchronous. Each request carries a per-context counter id and the
reply must echo it; nothing is ever retried.
"""
from __future__ import annotations

import secrets
import socket
from dataclasses import dataclass

from .core import (CloseSessionReq, CloseSessionResp, FinalizeCtx, FrameError, InvokeReq,
                   InvokeResp, OpenSessionReq, OpenSessionResp, Operation, ReturnCode,
                   TeeError, TraceDumpReq, TraceDumpResp, Uuid, decode_message, read_frame)


@dataclass
class Session:
    session_id: int
    context_id: int
    uuid: Uuid
    open: bool = True


class Context:
    """One connection to the manager. Use from one thread at a time."""

    def __init__(self, sock: socket.socket, context_id: int):
        self._sock = sock
        self.context_id = context_id
        self._next_id = 1
        self.live = True
        self.sessions: list[Session] = []

    def _call(self, message, expect):
        if not self.live:
            raise TeeError(ReturnCode.ErrorBadState, "context already finalized")
        rid = message.request_id
        try:
            self._sock.sendall(message.encode())
            frame = read_frame(self._sock)
        except (OSError, FrameError) as exc:
            self._drop()
            raise TeeError(ReturnCode.ErrorCommunication, f"manager link failed: {exc}") from None
        if frame is None:
            self._drop()
            raise TeeError(ReturnCode.ErrorCommunication, "manager closed the connection")
        try:
            reply = decode_message(frame)
        except (FrameError, ValueError) as exc:
            self._drop()
            raise TeeError(ReturnCode.ErrorCommunication, f"bad reply: {exc}") from None
        if not isinstance(reply, expect) or reply.request_id != rid:
            self._drop()
            raise TeeError(ReturnCode.ErrorCommunication, "reply does not match the request")
        return reply

    def _rid(self) -> int:
        rid = self._next_id
        self._next_id += 1
        return rid

    def _drop(self) -> None:
        self.live = False
        try:
            self._sock.close()
        except OSError:
            pass

    def open_session(self, uuid: Uuid, operation: Operation | None = None):
        """Returns (Session or None, code, Operation)."""
        op = operation or Operation()
        r = self._call(OpenSessionReq(self._rid(), self.context_id, uuid, op), OpenSessionResp)
        if r.code != ReturnCode.Success:
            return None, r.code, r.operation
        sess = Session(r.session_id, self.context_id, uuid)
        self.sessions.append(sess)
        return sess, r.code, r.operation

    def invoke_command(self, session: Session, command_id: int,
                       operation: Operation | None = None):
        """Returns (code, Operation)."""
        op = operation or Operation()
        r = self._call(InvokeReq(self._rid(), session.session_id, command_id, op), InvokeResp)
        return r.code, r.operation

    def close_session(self, session: Session) -> int:
        r = self._call(CloseSessionReq(self._rid(), session.session_id), CloseSessionResp)
        if r.code == ReturnCode.Success:
            session.open = False
        return r.code

    def dump_trace(self, uuid: Uuid) -> tuple[int, str]:
        r = self._call(TraceDumpReq(self._rid(), uuid), TraceDumpResp)
        return r.code, r.text.decode("utf-8", "replace")

    def finalize(self) -> int:
        r = self._call(FinalizeCtx(self._rid(), self.context_id), CloseSessionResp)
        for s in self.sessions:
            s.open = False
        self._drop()
        return r.code

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self.live:
            try:
                self.finalize()
            except TeeError:
                pass


def initialize_context(socket_path: str) -> Context:
    sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    try:
        sock.connect(socket_path)
    except OSError as exc:
        sock.close()
        raise TeeError(ReturnCode.ErrorCommunication,
                       f"no manager at {socket_path}: {exc}") from None
    return Context(sock, secrets.randbits(63))


def open_session(ctx: Context, uuid: Uuid, operation: Operation | None = None):
    return ctx.open_session(uuid, operation)


def invoke_command(session: Session, ctx: Context, command_id: int,
                   operation: Operation | None = None):
    return ctx.invoke_command(session, command_id, operation)


def close_session(ctx: Context, session: Session) -> int:
    return ctx.close_session(session)


def finalize_context(ctx: Context) -> int:
    return ctx.finalize()
