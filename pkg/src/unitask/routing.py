"""Deterministic task routing: parsed messages + session context -> plans.

A plan lists one invocation per task span, in lexical order. Tasks that
consume an existing image/video bind it from the session's modality slots;
when an earlier task in the same plan produces the needed modality, the
invocation instead carries a plan-local forward reference that dispatch
resolves after the producer ran.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping

from .artifacts import ArtifactRef, MediaKind, PendingArtifact, ref_from_json_dict
from .tokens import (
    ParsedMessage,
    Region,
    TaskKind,
    TaskSegment,
    TextSegment,
    Violation,
    effective_regions,
    serialize,
    validate,
)

if TYPE_CHECKING:
    from .registry import ExecutionResult


class MissingArtifact(Exception):
    def __init__(self, kind: TaskKind, slot: str):
        super().__init__(f"{kind.value} needs {slot} but the slot is empty")
        self.kind = kind
        self.slot = slot


class ValidationFailed(Exception):
    def __init__(self, violations: "list[Violation]"):
        super().__init__(f"message has {len(violations)} violation(s): {violations[0].code}")
        self.violations = tuple(violations)


class SessionMismatch(Exception):
    pass


# Which session slot a task consumes. Generation-from-text kinds are absent
# on purpose: they carry zero input artifacts.
SLOT_BY_INPUT: Mapping[TaskKind, str] = {
    TaskKind.IMAGE_EDIT_GLOBAL: "current_image",
    TaskKind.IMAGE_EDIT_REGION: "current_image",
    TaskKind.IMAGE_SEG: "current_image",
    TaskKind.IMAGE_TO_VIDEO: "current_image",
    TaskKind.VIDEO_EDIT: "current_video",
    TaskKind.VIDEO_SEG: "current_video",
}

# What each task produces.
OUTPUT_MEDIA: Mapping[TaskKind, MediaKind] = {
    TaskKind.IMAGE_GEN: MediaKind.IMAGE,
    TaskKind.LAYOUT_GEN: MediaKind.LAYOUT,
    TaskKind.IMAGE_EDIT_GLOBAL: MediaKind.IMAGE,
    TaskKind.IMAGE_EDIT_REGION: MediaKind.IMAGE,
    TaskKind.IMAGE_SEG: MediaKind.MASK,
    TaskKind.VIDEO_SEG: MediaKind.MASK,
    TaskKind.VIDEO_GEN: MediaKind.VIDEO,
    TaskKind.VIDEO_EDIT: MediaKind.VIDEO,
    TaskKind.IMAGE_TO_VIDEO: MediaKind.VIDEO,
    TaskKind.AUDIO_GEN: MediaKind.AUDIO,
}

SLOT_BY_MEDIA: Mapping[MediaKind, str] = {
    MediaKind.IMAGE: "current_image",
    MediaKind.VIDEO: "current_video",
    MediaKind.AUDIO: "current_audio",
}

_MEDIA_BY_SLOT = {slot: media for media, slot in SLOT_BY_MEDIA.items()}


@dataclass(frozen=True)
class TaskInvocation:
    kind: TaskKind
    prompt: str
    regions: tuple[Region, ...]
    input_artifacts: "tuple[ArtifactRef | PendingArtifact, ...]"
    ordinal: int

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "prompt": self.prompt,
            "regions": [r.to_list() for r in self.regions],
            "input_artifacts": [a.to_json_dict() for a in self.input_artifacts],
            "ordinal": self.ordinal,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TaskInvocation":
        return cls(
            kind=TaskKind(d["kind"]),
            prompt=d["prompt"],
            regions=tuple(Region(*coords) for coords in d["regions"]),
            input_artifacts=tuple(ref_from_json_dict(a) for a in d["input_artifacts"]),
            ordinal=int(d["ordinal"]),
        )


@dataclass(frozen=True)
class RoutingPlan:
    session_id: str
    plan_id: str
    invocations: tuple[TaskInvocation, ...]
    passthrough_text: str
    source_text: str

    def to_json_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "plan_id": self.plan_id,
            "invocations": [inv.to_json_dict() for inv in self.invocations],
            "passthrough_text": self.passthrough_text,
            "source_text": self.source_text,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RoutingPlan":
        return cls(
            session_id=d["session_id"],
            plan_id=d["plan_id"],
            invocations=tuple(TaskInvocation.from_json_dict(i) for i in d["invocations"]),
            passthrough_text=d["passthrough_text"],
            source_text=d["source_text"],
        )


@dataclass(frozen=True)
class HistoryEntry:
    plan: RoutingPlan
    result: "ExecutionResult"

    @property
    def message(self) -> str:
        return self.plan.source_text

    def to_json_dict(self) -> dict:
        return {
            "message": self.message,
            "plan": self.plan.to_json_dict(),
            "result": self.result.to_json_dict(),
        }


@dataclass(frozen=True)
class SessionContext:
    session_id: str
    turn_index: int = 0
    slots: Mapping[str, ArtifactRef] = field(default_factory=dict)
    history: tuple[HistoryEntry, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "turn_index": self.turn_index,
            "slots": {name: ref.to_json_dict() for name, ref in sorted(self.slots.items())},
            "history": [entry.to_json_dict() for entry in self.history],
        }


def _plan_id(session_id: str, turn_index: int, source_text: str) -> str:
    material = "\x00".join((session_id, str(turn_index), source_text))
    return hashlib.sha256(material.encode("utf-8")).hexdigest()[:16]


def route(msg: ParsedMessage, ctx: SessionContext) -> RoutingPlan:
    violations = validate(msg)
    if violations:
        raise ValidationFailed(violations)

    regions_by_task = effective_regions(msg.segments)
    source_text = msg.raw if msg.raw else serialize(msg)

    invocations: list[TaskInvocation] = []
    texts: list[str] = []
    # latest in-plan producer ordinal per slot, for forward references
    produced: dict[str, int] = {}
    for idx, seg in enumerate(msg.segments):
        if isinstance(seg, TextSegment):
            texts.append(seg.content)
            continue
        if not isinstance(seg, TaskSegment):
            continue
        ordinal = len(invocations)
        inputs: tuple[ArtifactRef | PendingArtifact, ...] = ()
        slot = SLOT_BY_INPUT.get(seg.kind)
        if slot is not None:
            if slot in produced:
                inputs = (PendingArtifact(ordinal=produced[slot], media=_MEDIA_BY_SLOT[slot]),)
            elif slot in ctx.slots:
                inputs = (ctx.slots[slot],)
            else:
                raise MissingArtifact(seg.kind, slot)
        invocations.append(
            TaskInvocation(
                kind=seg.kind,
                prompt=seg.payload,
                regions=regions_by_task.get(idx, ()),
                input_artifacts=inputs,
                ordinal=ordinal,
            )
        )
        out_slot = SLOT_BY_MEDIA.get(OUTPUT_MEDIA[seg.kind])
        if out_slot is not None:
            produced[out_slot] = ordinal

    return RoutingPlan(
        session_id=ctx.session_id,
        plan_id=_plan_id(ctx.session_id, ctx.turn_index, source_text),
        invocations=tuple(invocations),
        passthrough_text="".join(texts),
        source_text=source_text,
    )


def update_session(ctx: SessionContext, result: "ExecutionResult") -> SessionContext:
    if result.session_id != ctx.session_id:
        raise SessionMismatch(
            f"result belongs to session {result.session_id!r}, context is {ctx.session_id!r}"
        )
    slots = dict(ctx.slots)
    for outcome in result.outcomes:
        if outcome.status != "ok" or outcome.output is None:
            continue
        artifact = outcome.output.artifact
        slot = SLOT_BY_MEDIA.get(artifact.media)
        if slot is not None:
            slots[slot] = artifact
    return SessionContext(
        session_id=ctx.session_id,
        turn_index=ctx.turn_index + 1,
        slots=slots,
        history=ctx.history + (HistoryEntry(plan=result.plan, result=result),),
    )
