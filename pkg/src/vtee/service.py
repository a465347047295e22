"""HTTP admin API of a running daemon (served on a unix socket)."""
from __future__ import annotations

import threading

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .core import MalformedUuid, TaManifest, TeeError, parse_uuid
from .manager import DigestMismatch, DuplicateUuid


class Status(BaseModel):
    backend: str
    tas: int
    sessions: int
    instances: int


class TaInfo(BaseModel):
    uuid: str
    name: str
    running: bool
    digest: str


class InstallRequest(BaseModel):
    manifest: str
    image_hex: str


class SessionInfo(BaseModel):
    session_id: int
    context_id: int
    uuid: str
    state: str


class TraceText(BaseModel):
    uuid: str
    text: str


def create_app(daemon) -> FastAPI:
    manager = daemon.manager
    app = FastAPI(title="vtee manager")

    @app.get("/status", response_model=Status)
    def status():
        return Status(**{k: v for k, v in manager.status().items() if k in Status.model_fields})

    @app.get("/tas", response_model=list[TaInfo])
    def list_tas():
        return [TaInfo(**t) for t in manager.list_tas()]

    @app.post("/tas", response_model=TaInfo, status_code=201)
    def install(req: InstallRequest):
        try:
            manifest = TaManifest.parse(req.manifest)
            image = bytes.fromhex(req.image_hex)
        except ValueError as exc:
            raise HTTPException(400, f"bad package: {exc}") from None
        try:
            manager.install_ta(manifest, image)
        except DigestMismatch:
            raise HTTPException(400, "digest mismatch") from None
        except DuplicateUuid as exc:
            raise HTTPException(409, str(exc)) from None
        info = next(t for t in manager.list_tas() if t["uuid"] == str(manifest.uuid))
        return TaInfo(**info)

    @app.get("/sessions", response_model=list[SessionInfo])
    def sessions():
        return [SessionInfo(session_id=r.session_id, context_id=r.context_id, uuid=str(r.uuid),
                            state=r.state.value) for r in manager.sessions()]

    @app.get("/tas/{uuid}/trace", response_model=TraceText)
    def trace(uuid: str):
        try:
            u = parse_uuid(uuid)
        except MalformedUuid as exc:
            raise HTTPException(400, str(exc)) from None
        try:
            return TraceText(uuid=uuid, text=manager.trace_text(u))
        except TeeError as exc:
            raise HTTPException(404, str(exc)) from None

    @app.post("/shutdown")
    def shutdown():
        threading.Timer(0.05, daemon.stop).start()
        return {"stopping": True}

    return app
