"""HTTP face of the pipeline: parse, route, execute, session lookup.

Status mapping: 400 malformed request body, 404 unknown session, 422 for
token/validation/routing failures, 502 when a remote expert's transport
gives out. Execute serializes per session and honors idempotency keys so a
retried request cannot run an expert twice.
"""
from __future__ import annotations

import threading

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .artifacts import ArtifactStore
from .config import AppConfig
from .registry import ExpertRegistry, NoExpertRegistered, dispatch
from .remote import RemoteError, RemoteExpertClient
from .routing import MissingArtifact, SessionContext, ValidationFailed, route, update_session
from .sessions import CorruptState, SessionStore, UnknownSession
from .tokens import MalformedToken, parse, segment_to_json_dict


class ParseBody(BaseModel):
    text: str


class RouteBody(BaseModel):
    text: str
    session_id: str


class ExecuteBody(BaseModel):
    text: str
    session_id: str
    idempotency_key: "str | None" = None


def _error(status: int, code: str, **extra) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, **extra}})


def _routing_error(exc: Exception) -> JSONResponse:
    if isinstance(exc, MalformedToken):
        return _error(422, exc.code, offset=exc.offset, detail=exc.reason)
    if isinstance(exc, ValidationFailed):
        return _error(
            422, "validation-failed", violations=[v.to_json_dict() for v in exc.violations]
        )
    if isinstance(exc, MissingArtifact):
        return _error(422, "missing-artifact", detail=str(exc))
    if isinstance(exc, NoExpertRegistered):
        return _error(422, "no-expert", detail=str(exc))
    raise exc


def create_app(
    config: "AppConfig | None" = None,
    registry: "ExpertRegistry | None" = None,
    store: "ArtifactStore | None" = None,
    session_store: "SessionStore | None" = None,
    client: "RemoteExpertClient | None" = None,
) -> FastAPI:
    config = config if config is not None else AppConfig()
    registry = registry if registry is not None else config.build_registry()
    store = store if store is not None else ArtifactStore()
    sessions = session_store if session_store is not None else SessionStore(config.state_dir)

    app = FastAPI(title="unitask", docs_url=None, redoc_url=None)
    guard = threading.Lock()
    session_locks: dict[str, threading.Lock] = {}
    idempotency_cache: dict[tuple[str, str], dict] = {}

    def lock_for(session_id: str) -> threading.Lock:
        with guard:
            return session_locks.setdefault(session_id, threading.Lock())

    def load_context(session_id: str) -> SessionContext:
        if sessions.exists(session_id):
            return sessions.load(session_id)
        return SessionContext(session_id=session_id)

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request: Request, exc: RequestValidationError):
        return _error(400, "bad-request", detail="request body does not match the endpoint schema")

    @app.exception_handler(CorruptState)
    async def corrupt_state(request: Request, exc: CorruptState):
        return _error(500, "corrupt-state", detail=str(exc))

    @app.post("/v1/parse")
    def parse_endpoint(body: ParseBody):
        try:
            msg = parse(body.text)
        except MalformedToken as exc:
            return _error(422, exc.code, offset=exc.offset, detail=exc.reason)
        return {"segments": [segment_to_json_dict(s) for s in msg.segments]}

    @app.post("/v1/route")
    def route_endpoint(body: RouteBody):
        ctx = load_context(body.session_id)
        try:
            plan = route(parse(body.text), ctx)
        except (MalformedToken, ValidationFailed, MissingArtifact) as exc:
            return _routing_error(exc)
        return plan.to_json_dict()

    @app.post("/v1/execute")
    def execute_endpoint(body: ExecuteBody):
        with lock_for(body.session_id):
            if body.idempotency_key is not None:
                cached = idempotency_cache.get((body.session_id, body.idempotency_key))
                if cached is not None:
                    return cached
            ctx = load_context(body.session_id)
            try:
                plan = route(parse(body.text), ctx)
                result = dispatch(plan, registry, store=store, client=client)
            except (MalformedToken, ValidationFailed, MissingArtifact, NoExpertRegistered) as exc:
                return _routing_error(exc)
            except RemoteError as exc:
                return _error(502, "remote-transport", detail=str(exc))
            ctx = update_session(ctx, result)
            sessions.save(ctx)
            response = {
                "plan": plan.to_json_dict(),
                "result": result.to_json_dict(),
                "session": ctx.to_json_dict(),
            }
            if body.idempotency_key is not None:
                idempotency_cache[(body.session_id, body.idempotency_key)] = response
            return response

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        try:
            ctx = sessions.load(session_id)
        except UnknownSession:
            return _error(404, "unknown-session", detail=session_id)
        return ctx.to_json_dict()

    return app


def serve(config: AppConfig) -> None:
    import uvicorn

    host, _, port = config.listen.rpartition(":")
    uvicorn.run(
        create_app(config),
        host=host or "127.0.0.1",
        port=int(port),
        log_level=config.log_level,
    )
