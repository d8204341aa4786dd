"""Expert descriptors, deterministic mock execution, and plan dispatch.

Each task kind resolves to exactly one expert. Mocks stand in for the real
generation/editing/segmentation models: their outputs are pure functions of
(seed, kind, prompt, regions, input digests), so transcripts replay
byte-identically. Remote experts speak a small idempotent HTTP contract.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

from .artifacts import ArtifactRef, ArtifactStore, MediaKind, PendingArtifact
from .routing import OUTPUT_MEDIA, RoutingPlan, TaskInvocation
from .tokens import Region, TaskKind, format_region

if TYPE_CHECKING:
    from .remote import RemoteExpertClient


class NoExpertRegistered(KeyError):
    def __init__(self, kind: TaskKind):
        super().__init__(kind.value)
        self.kind = kind

    def __str__(self) -> str:
        return f"no expert registered for {self.kind.value}"


class DuplicateKind(ValueError):
    pass


@dataclass(frozen=True)
class MockBackend:
    seed: int = 0


@dataclass(frozen=True)
class RemoteBackend:
    endpoint: str
    timeout: float = 10.0
    max_retries: int = 2


@dataclass(frozen=True)
class ExpertDescriptor:
    name: str
    supported_kinds: frozenset[TaskKind]
    backend: "MockBackend | RemoteBackend"

    def __post_init__(self):
        if not self.supported_kinds:
            raise ValueError("supported_kinds must be nonempty")
        object.__setattr__(self, "supported_kinds", frozenset(self.supported_kinds))


class ExpertRegistry:
    def __init__(self, descriptors: Iterable[ExpertDescriptor] = ()):
        self._by_kind: dict[TaskKind, ExpertDescriptor] = {}
        for d in descriptors:
            self.register(d)

    def register(self, d: ExpertDescriptor) -> None:
        taken = [k for k in d.supported_kinds if k in self._by_kind]
        if taken:
            names = ", ".join(sorted(k.value for k in taken))
            raise DuplicateKind(f"{names} already registered")
        for k in d.supported_kinds:
            self._by_kind[k] = d

    def resolve(self, kind: TaskKind) -> ExpertDescriptor:
        try:
            return self._by_kind[kind]
        except KeyError:
            raise NoExpertRegistered(kind) from None

    def kinds(self) -> frozenset[TaskKind]:
        return frozenset(self._by_kind)

    def descriptors(self) -> tuple[ExpertDescriptor, ...]:
        seen: dict[int, ExpertDescriptor] = {}
        for d in self._by_kind.values():
            seen.setdefault(id(d), d)
        return tuple(seen.values())


def default_registry(seed: int = 0) -> ExpertRegistry:
    """The stock mapping of task kinds to named experts, all mock-backed."""
    mk = MockBackend(seed=seed)
    return ExpertRegistry(
        [
            ExpertDescriptor("stable-diffusion", frozenset({TaskKind.IMAGE_GEN}), mk),
            ExpertDescriptor("gligen-layout", frozenset({TaskKind.LAYOUT_GEN}), mk),
            ExpertDescriptor("instruct-pix2pix", frozenset({TaskKind.IMAGE_EDIT_GLOBAL}), mk),
            ExpertDescriptor("gligen-edit", frozenset({TaskKind.IMAGE_EDIT_REGION}), mk),
            ExpertDescriptor("seem", frozenset({TaskKind.IMAGE_SEG, TaskKind.VIDEO_SEG}), mk),
            ExpertDescriptor("fresco", frozenset({TaskKind.VIDEO_EDIT}), mk),
            ExpertDescriptor("modelscope-t2v", frozenset({TaskKind.VIDEO_GEN}), mk),
            ExpertDescriptor("i2vgen-xl", frozenset({TaskKind.IMAGE_TO_VIDEO}), mk),
            ExpertDescriptor("auffusion", frozenset({TaskKind.AUDIO_GEN}), mk),
        ]
    )


def registry_from_config(entries: list[dict], default_seed: int = 0) -> ExpertRegistry:
    """Build a registry from config rows:
    {name, kinds, backend: mock|remote, seed?, endpoint?, timeout_ms?, max_retries?}
    """
    registry = ExpertRegistry()
    for row in entries:
        kinds = frozenset(TaskKind(k) for k in row["kinds"])
        backend_name = row.get("backend", "mock")
        if backend_name == "mock":
            backend: MockBackend | RemoteBackend = MockBackend(seed=int(row.get("seed", default_seed)))
        elif backend_name == "remote":
            backend = RemoteBackend(
                endpoint=row["endpoint"],
                timeout=float(row.get("timeout_ms", 10_000)) / 1000.0,
                max_retries=int(row.get("max_retries", 2)),
            )
        else:
            raise ValueError(f"unknown backend {backend_name!r}")
        registry.register(ExpertDescriptor(name=row["name"], supported_kinds=kinds, backend=backend))
    return registry


@dataclass(frozen=True)
class ExpertOutput:
    expert_name: str
    artifact: ArtifactRef
    latency_ms: float
    mask: "tuple[str, ...] | None" = None  # rows of '0'/'1', top to bottom
    layout: "tuple[tuple[str, Region], ...] | None" = None

    def to_json_dict(self) -> dict:
        d: dict = {
            "expert_name": self.expert_name,
            "artifact": self.artifact.to_json_dict(),
            "latency_ms": self.latency_ms,
        }
        if self.mask is not None:
            d["mask"] = list(self.mask)
        if self.layout is not None:
            d["layout"] = [[label, region.to_list()] for label, region in self.layout]
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExpertOutput":
        mask = tuple(d["mask"]) if "mask" in d and d["mask"] is not None else None
        layout = None
        if "layout" in d and d["layout"] is not None:
            layout = tuple((label, Region(*coords)) for label, coords in d["layout"])
        return cls(
            expert_name=d["expert_name"],
            artifact=ArtifactRef.from_json_dict(d["artifact"]),
            latency_ms=float(d["latency_ms"]),
            mask=mask,
            layout=layout,
        )


@dataclass(frozen=True)
class Outcome:
    ordinal: int
    status: str  # "ok" | "error"
    output: "ExpertOutput | None" = None
    error_code: "str | None" = None
    detail: "str | None" = None

    def to_json_dict(self) -> dict:
        d: dict = {"ordinal": self.ordinal, "status": self.status}
        if self.output is not None:
            d["output"] = self.output.to_json_dict()
        if self.error_code is not None:
            d["error_code"] = self.error_code
            d["detail"] = self.detail or ""
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "Outcome":
        return cls(
            ordinal=int(d["ordinal"]),
            status=d["status"],
            output=ExpertOutput.from_json_dict(d["output"]) if "output" in d else None,
            error_code=d.get("error_code"),
            detail=d.get("detail"),
        )


@dataclass(frozen=True)
class ExecutionResult:
    session_id: str
    plan: RoutingPlan
    outcomes: tuple[Outcome, ...]
    total_latency_ms: float

    def to_json_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "plan": self.plan.to_json_dict(),
            "outcomes": [o.to_json_dict() for o in self.outcomes],
            "total_latency_ms": self.total_latency_ms,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExecutionResult":
        return cls(
            session_id=d["session_id"],
            plan=RoutingPlan.from_json_dict(d["plan"]),
            outcomes=tuple(Outcome.from_json_dict(o) for o in d["outcomes"]),
            total_latency_ms=float(d["total_latency_ms"]),
        )


MOCK_MASK_GRID = 16


def rasterize_mask(regions: tuple[Region, ...], grid: int = MOCK_MASK_GRID) -> tuple[str, ...]:
    """Cell (i, j) is set iff its center lies inside some region."""
    rows = []
    for i in range(grid):
        cy = (i + 0.5) / grid
        row = []
        for j in range(grid):
            cx = (j + 0.5) / grid
            hit = any(r.x1 <= cx <= r.x2 and r.y1 <= cy <= r.y2 for r in regions)
            row.append("1" if hit else "0")
        rows.append("".join(row))
    return tuple(rows)


def _mock_material(inv: TaskInvocation, seed: int, inputs: tuple[ArtifactRef, ...]) -> str:
    return json.dumps(
        {
            "seed": seed,
            "kind": inv.kind.value,
            "prompt": inv.prompt,
            "regions": [format_region(r) for r in inv.regions],
            "inputs": [ref.digest for ref in inputs],
        },
        sort_keys=True,
    )


def _pseudo_latency(digest: str) -> float:
    return (int(digest[:6], 16) % 3000) / 100.0


def mock_execute(
    inv: TaskInvocation,
    seed: int,
    store: ArtifactStore,
    inputs: tuple[ArtifactRef, ...] = (),
    expert_name: str = "mock",
    grid: int = MOCK_MASK_GRID,
) -> ExpertOutput:
    material = _mock_material(inv, seed, inputs)
    media = OUTPUT_MEDIA[inv.kind]
    mask: tuple[str, ...] | None = None
    layout: tuple[tuple[str, Region], ...] | None = None
    if media is MediaKind.MASK:
        mask = rasterize_mask(inv.regions, grid)
        content = material + "\n" + "\n".join(mask)
    elif media is MediaKind.LAYOUT:
        words = inv.prompt.split() or ["item"]
        layout = tuple((words[i % len(words)], r) for i, r in enumerate(inv.regions))
        content = material + "\n" + json.dumps(
            [[label, format_region(r)] for label, r in layout], sort_keys=True
        )
    else:
        content = material
    ref = store.put(content.encode("utf-8"), media)
    return ExpertOutput(
        expert_name=expert_name,
        artifact=ref,
        latency_ms=_pseudo_latency(ref.digest),
        mask=mask,
        layout=layout,
    )


def idempotency_key(plan_id: str, ordinal: int) -> str:
    return hashlib.sha256(f"{plan_id}:{ordinal}".encode("ascii")).hexdigest()[:32]


UPSTREAM_FAILURE = "upstream-failure"
EXPERT_PANIC = "expert-panic"


def dispatch(
    plan: RoutingPlan,
    registry: ExpertRegistry,
    store: "ArtifactStore | None" = None,
    client: "RemoteExpertClient | None" = None,
) -> ExecutionResult:
    """Run a plan's invocations in order, recording one outcome per ordinal.

    A failed invocation only poisons later ones that consume its output.
    Remote transport exhaustion raises; everything expert-side becomes a
    Failure outcome.
    """
    from .remote import RemoteExpertFailure

    # resolve everything up front: an unroutable plan is a caller error
    experts = [registry.resolve(inv.kind) for inv in plan.invocations]
    if store is None:
        store = ArtifactStore()

    outcomes: list[Outcome] = []
    for inv, descriptor in zip(plan.invocations, experts):
        inputs: list[ArtifactRef] = []
        blocked: Outcome | None = None
        for ref in inv.input_artifacts:
            if isinstance(ref, PendingArtifact):
                upstream = outcomes[ref.ordinal]
                if upstream.status != "ok" or upstream.output is None:
                    blocked = Outcome(
                        ordinal=inv.ordinal,
                        status="error",
                        error_code=UPSTREAM_FAILURE,
                        detail=f"invocation {ref.ordinal} did not produce its artifact",
                    )
                    break
                inputs.append(upstream.output.artifact)
            else:
                inputs.append(ref)
        if blocked is not None:
            outcomes.append(blocked)
            continue

        if isinstance(descriptor.backend, MockBackend):
            try:
                output = mock_execute(
                    inv,
                    descriptor.backend.seed,
                    store,
                    tuple(inputs),
                    expert_name=descriptor.name,
                )
                outcomes.append(Outcome(ordinal=inv.ordinal, status="ok", output=output))
            except Exception as exc:
                outcomes.append(
                    Outcome(
                        ordinal=inv.ordinal,
                        status="error",
                        error_code=EXPERT_PANIC,
                        detail=f"{type(exc).__name__}: {exc}",
                    )
                )
        else:
            if client is None:
                raise ValueError(f"expert {descriptor.name!r} is remote but no client was given")
            try:
                output = client.execute(
                    descriptor,
                    inv,
                    inputs=tuple(inputs),
                    key=idempotency_key(plan.plan_id, inv.ordinal),
                )
                outcomes.append(Outcome(ordinal=inv.ordinal, status="ok", output=output))
            except RemoteExpertFailure as exc:
                outcomes.append(
                    Outcome(
                        ordinal=inv.ordinal,
                        status="error",
                        error_code=exc.code,
                        detail=exc.detail,
                    )
                )

    total = sum(o.output.latency_ms for o in outcomes if o.output is not None)
    return ExecutionResult(
        session_id=plan.session_id,
        plan=plan,
        outcomes=tuple(outcomes),
        total_latency_ms=total,
    )
