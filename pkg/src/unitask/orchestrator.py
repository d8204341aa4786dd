"""Transcript replay: parse -> route -> dispatch per turn, with isolation.

A transcript is a prerecorded sequence of model-output turns for one
session. Each turn runs through the full pipeline; a turn that fails at any
stage is recorded in the report and leaves the session unchanged, and the
remaining turns still run. Under mock backends the report is byte-identical
across runs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from .artifacts import ArtifactStore
from .config import AppConfig
from .registry import ExecutionResult, ExpertRegistry, NoExpertRegistered, dispatch
from .remote import RemoteError, RemoteTimeout
from .routing import (
    MissingArtifact,
    SessionContext,
    ValidationFailed,
    route,
    update_session,
)
from .tokens import MalformedToken, parse, segment_to_json_dict

if TYPE_CHECKING:
    from .remote import RemoteExpertClient


class TranscriptError(ValueError):
    pass


@dataclass(frozen=True)
class Transcript:
    session_id: str
    turns: tuple[str, ...]

    def __post_init__(self):
        if not self.turns:
            raise TranscriptError("transcript has no turns")


def read_transcript(path: "str | Path") -> Transcript:
    """JSONL, one line per turn: {"session_id": ..., "turn_text": ...}"""
    session_id: "str | None" = None
    turns: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                sid, text = str(doc["session_id"]), str(doc["turn_text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise TranscriptError(f"line {lineno}: {exc}") from exc
            if session_id is None:
                session_id = sid
            elif sid != session_id:
                raise TranscriptError(
                    f"line {lineno}: session {sid!r} differs from {session_id!r}"
                )
            turns.append(text)
    if session_id is None:
        raise TranscriptError("transcript has no turns")
    return Transcript(session_id=session_id, turns=tuple(turns))


def _error_payload(exc: Exception) -> dict:
    if isinstance(exc, MalformedToken):
        return {"code": exc.code, "offset": exc.offset, "detail": exc.reason}
    if isinstance(exc, ValidationFailed):
        return {
            "code": "validation-failed",
            "violations": [v.to_json_dict() for v in exc.violations],
        }
    if isinstance(exc, MissingArtifact):
        return {"code": "missing-artifact", "detail": str(exc)}
    if isinstance(exc, NoExpertRegistered):
        return {"code": "no-expert", "detail": str(exc)}
    if isinstance(exc, RemoteTimeout):
        return {"code": "remote-timeout", "detail": str(exc)}
    if isinstance(exc, RemoteError):
        return {"code": "remote-error", "detail": str(exc)}
    raise exc


_STAGE_ERRORS = (MalformedToken, ValidationFailed, MissingArtifact, NoExpertRegistered, RemoteError)


@dataclass(frozen=True)
class RunReport:
    session_id: str
    entries: tuple[dict, ...]
    final_context: dict
    config: dict
    aggregate: dict

    def to_json_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "entries": list(self.entries),
            "final_context": self.final_context,
            "config": self.config,
            "aggregate": self.aggregate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"


def run_transcript(
    transcript: Transcript,
    config: "AppConfig | None" = None,
    registry: "ExpertRegistry | None" = None,
    store: "ArtifactStore | None" = None,
    client: "RemoteExpertClient | None" = None,
    initial_ctx: "SessionContext | None" = None,
) -> RunReport:
    config = config if config is not None else AppConfig()
    registry = registry if registry is not None else config.build_registry()
    store = store if store is not None else ArtifactStore()
    ctx = initial_ctx if initial_ctx is not None else SessionContext(session_id=transcript.session_id)

    entries: list[dict] = []
    n_invocations = 0
    n_failures = 0
    total_latency = 0.0
    for turn_no, text in enumerate(transcript.turns):
        stage = "parse"
        try:
            msg = parse(text)
            stage = "route"
            plan = route(msg, ctx)
            stage = "dispatch"
            result: ExecutionResult = dispatch(plan, registry, store=store, client=client)
            ctx = update_session(ctx, result)
        except _STAGE_ERRORS as exc:
            n_failures += 1
            entries.append(
                {
                    "turn": turn_no,
                    "status": "error",
                    "stage": stage,
                    "error": _error_payload(exc),
                }
            )
            continue
        n_invocations += len(plan.invocations)
        n_failures += sum(1 for o in result.outcomes if o.status != "ok")
        total_latency += result.total_latency_ms
        entries.append(
            {
                "turn": turn_no,
                "status": "ok",
                "message_segments": [segment_to_json_dict(s) for s in msg.segments],
                "plan": plan.to_json_dict(),
                "result": result.to_json_dict(),
            }
        )

    return RunReport(
        session_id=transcript.session_id,
        entries=tuple(entries),
        final_context=ctx.to_json_dict(),
        config=config.to_json_dict(),
        aggregate={
            "turns": len(transcript.turns),
            "invocations": n_invocations,
            "failures": n_failures,
            "total_latency_ms": total_latency,
        },
    )
