"""HTTP client for remote experts: idempotent POST with bounded retries.

Wire contract, one request per invocation:

    POST <endpoint>
    Idempotency-Key: <hash of plan id + ordinal>
    {"kind": ..., "prompt": ..., "regions": [[x1,y1,x2,y2], ...],
     "input_artifact_ids": [...], "idempotency_key": ...}

    200 {"status": "ok", "artifact": {"digest", "media"}, "latency_ms": ...}
    200 {"status": "error", "code": ..., "detail": ...}

Transport errors and 502/503/504 are retried with exponential backoff up to
max_retries; expert-reported errors are never retried (re-running a
generation is a side effect, a retry cannot fix a semantic failure).
"""
from __future__ import annotations

import time
from typing import TYPE_CHECKING, Callable

import httpx

if TYPE_CHECKING:
    from .artifacts import ArtifactRef
    from .registry import ExpertDescriptor, ExpertOutput
    from .routing import TaskInvocation


class RemoteError(Exception):
    """Transport-level failure talking to a remote expert."""


class RemoteTimeout(RemoteError):
    """All attempts exhausted without a usable response."""


class RemoteProtocolError(RemoteError):
    """The expert answered with something outside the wire contract."""


class RemoteExpertFailure(Exception):
    """The expert answered, and the answer is a semantic failure."""

    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


_RETRY_STATUS = frozenset({502, 503, 504})


class RemoteExpertClient:
    def __init__(
        self,
        transport: "httpx.BaseTransport | None" = None,
        sleep: Callable[[float], None] = time.sleep,
        backoff_base: float = 0.05,
    ):
        self._client = httpx.Client(transport=transport)
        self._sleep = sleep
        self._backoff_base = backoff_base

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "RemoteExpertClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def execute(
        self,
        descriptor: "ExpertDescriptor",
        inv: "TaskInvocation",
        inputs: "tuple[ArtifactRef, ...]",
        key: str,
    ) -> "ExpertOutput":
        from .registry import ExpertOutput, RemoteBackend

        backend = descriptor.backend
        assert isinstance(backend, RemoteBackend)
        payload = {
            "kind": inv.kind.value,
            "prompt": inv.prompt,
            "regions": [r.to_list() for r in inv.regions],
            "input_artifact_ids": [ref.digest for ref in inputs],
            "idempotency_key": key,
        }
        doc = self._post_with_retries(backend, payload, key)
        try:
            return ExpertOutput.from_json_dict(
                {
                    "expert_name": descriptor.name,
                    "artifact": doc["artifact"],
                    "latency_ms": doc.get("latency_ms", 0.0),
                    "mask": doc.get("mask"),
                    "layout": doc.get("layout"),
                }
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise RemoteProtocolError(f"bad expert response payload: {exc}") from exc

    def _post_with_retries(self, backend, payload: dict, key: str) -> dict:
        last: str = "no attempt made"
        for attempt in range(backend.max_retries + 1):
            if attempt:
                self._sleep(self._backoff_base * (2 ** (attempt - 1)))
            try:
                resp = self._client.post(
                    backend.endpoint,
                    json=payload,
                    headers={"Idempotency-Key": key},
                    timeout=backend.timeout,
                )
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code in _RETRY_STATUS:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise RemoteExpertFailure(f"http-{resp.status_code}", resp.text)
            try:
                doc = resp.json()
            except ValueError as exc:
                raise RemoteProtocolError(f"non-JSON expert response: {exc}") from exc
            status = doc.get("status")
            if status == "ok":
                return doc
            if status == "error":
                raise RemoteExpertFailure(
                    str(doc.get("code", "expert-error")), str(doc.get("detail", ""))
                )
            raise RemoteProtocolError(f"unknown response status {status!r}")
        raise RemoteTimeout(
            f"{backend.endpoint} unreachable after {backend.max_retries + 1} attempts ({last})"
        )
