"""Checksummed JSON persistence for session contexts.

A session file is {"version", "checksum", "context"} where the checksum is
the sha256 of the canonical context JSON. Loading verifies it and refuses
silently damaged state.
"""
from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

from .artifacts import ArtifactRef
from .registry import ExecutionResult
from .routing import HistoryEntry, RoutingPlan, SessionContext

STORE_VERSION = 1


class CorruptState(ValueError):
    pass


class UnknownSession(KeyError):
    pass


def context_from_json_dict(d: dict) -> SessionContext:
    return SessionContext(
        session_id=d["session_id"],
        turn_index=int(d["turn_index"]),
        slots={name: ArtifactRef.from_json_dict(ref) for name, ref in d["slots"].items()},
        history=tuple(
            HistoryEntry(
                plan=RoutingPlan.from_json_dict(e["plan"]),
                result=ExecutionResult.from_json_dict(e["result"]),
            )
            for e in d["history"]
        ),
    )


def _canonical(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


_SAFE_ID = re.compile(r"[A-Za-z0-9._-]{1,64}\Z")


class SessionStore:
    def __init__(self, root: "str | Path"):
        self._root = Path(root)
        self._root.mkdir(parents=True, exist_ok=True)

    def _path(self, session_id: str) -> Path:
        if _SAFE_ID.match(session_id):
            name = session_id
        else:
            name = hashlib.sha256(session_id.encode("utf-8")).hexdigest()[:32]
        return self._root / f"{name}.json"

    def save(self, ctx: SessionContext) -> None:
        context = ctx.to_json_dict()
        doc = {
            "version": STORE_VERSION,
            "checksum": hashlib.sha256(_canonical(context).encode("utf-8")).hexdigest(),
            "context": context,
        }
        self._path(ctx.session_id).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")

    def exists(self, session_id: str) -> bool:
        return self._path(session_id).exists()

    def load(self, session_id: str) -> SessionContext:
        path = self._path(session_id)
        if not path.exists():
            raise UnknownSession(session_id)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CorruptState(f"{path}: unreadable session file: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("version") != STORE_VERSION:
            raise CorruptState(f"{path}: unsupported session file")
        context = doc.get("context")
        checksum = doc.get("checksum")
        if not isinstance(context, dict) or not isinstance(checksum, str):
            raise CorruptState(f"{path}: missing context or checksum")
        actual = hashlib.sha256(_canonical(context).encode("utf-8")).hexdigest()
        if actual != checksum:
            raise CorruptState(f"{path}: checksum mismatch")
        try:
            return context_from_json_dict(context)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptState(f"{path}: malformed context: {exc}") from exc
