"""Unified-format dataset construction: convert, synthesize, filter.

Annotated samples (captions with optional boxes) become conversation records
whose assistant turns carry task tokens and grounding tokens. A seeded
template sampler stands in for an external dialogue generator; the format
filter is the real quality gate and rejects any record whose assistant turns
do not parse and validate, or whose roles do not alternate.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import random

from .tokens import (
    REGION_REQUIRED,
    GroundingSegment,
    MalformedToken,
    Region,
    TaskKind,
    TaskSegment,
    TextSegment,
    Violation,
    iter_regions,
    parse,
    serialize,
    validate,
)

ROLE_ORDER = "role-order"

RECORDS_FORMAT = "unified-conversations"
RECORDS_VERSION = 1


class TemplateMissing(KeyError):
    pass


class RegionRequired(ValueError):
    pass


class InsufficientCaptions(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Caption:
    text: str
    region: "Region | None" = None


@dataclass(frozen=True)
class AnnotatedSample:
    image_ref: str
    captions: tuple[Caption, ...]
    source_task: TaskKind
    source_dataset: str


@dataclass(frozen=True)
class Turn:
    role: str
    content: str


@dataclass(frozen=True)
class ConversationRecord:
    id: str
    turns: tuple[Turn, ...]
    task_kinds: frozenset[TaskKind]

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "turns": [{"role": t.role, "content": t.content} for t in self.turns],
            "task_kinds": sorted(k.value for k in self.task_kinds),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ConversationRecord":
        return cls(
            id=str(d["id"]),
            turns=tuple(Turn(role=t["role"], content=t["content"]) for t in d["turns"]),
            task_kinds=frozenset(TaskKind(k) for k in d.get("task_kinds", [])),
        )


@dataclass(frozen=True)
class Template:
    id: str
    kind: TaskKind
    user: str  # format string over {caption}
    lead: str = ""  # assistant text before the task token

    @property
    def needs_region(self) -> bool:
        return self.kind in REGION_REQUIRED


_DEFAULTS = (
    Template("gen-default", TaskKind.IMAGE_GEN, "Please generate an image of {caption}.", "Sure, generating it now. "),
    Template("layout-default", TaskKind.LAYOUT_GEN, "Lay out the scene: {caption}.", "Here is a layout plan. "),
    Template("globaledit-default", TaskKind.IMAGE_EDIT_GLOBAL, "Apply this change to the whole image: {caption}.", "Applying the edit. "),
    Template("edit-default", TaskKind.IMAGE_EDIT_REGION, "Edit the marked area: {caption}.", "Editing that region. "),
    Template("seg-default", TaskKind.IMAGE_SEG, "Segment {caption} in the image.", "Here is the mask. "),
    Template("vseg-default", TaskKind.VIDEO_SEG, "Track and segment {caption} in the video.", "Segmenting across frames. "),
    Template("vgen-default", TaskKind.VIDEO_GEN, "Create a short video of {caption}.", "Rendering the clip. "),
    Template("vedit-default", TaskKind.VIDEO_EDIT, "Edit the video: {caption}.", "Updating the video. "),
    Template("i2v-default", TaskKind.IMAGE_TO_VIDEO, "Animate this image: {caption}.", "Bringing it to life. "),
    Template("agen-default", TaskKind.AUDIO_GEN, "Generate audio of {caption}.", "Composing it. "),
)

DEFAULT_TEMPLATES: Mapping[str, Template] = {t.id: t for t in _DEFAULTS}
_DEFAULT_BY_KIND: Mapping[TaskKind, Template] = {t.kind: t for t in _DEFAULTS}


def load_templates(directory: "str | Path") -> dict[str, Template]:
    """Read extra templates ({id, kind, user, lead} JSON files) over the defaults."""
    table = dict(DEFAULT_TEMPLATES)
    for path in sorted(Path(directory).glob("*.json")):
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            t = Template(
                id=str(doc["id"]),
                kind=TaskKind(doc["kind"]),
                user=str(doc["user"]),
                lead=str(doc.get("lead", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: bad template: {exc}") from exc
        if t.id in table:
            raise DatasetFormatError(f"{path}: duplicate template id {t.id!r}")
        table[t.id] = t
    return table


def _assistant_content(template: Template, caption: Caption) -> str:
    segments: list = []
    if template.lead:
        segments.append(TextSegment(template.lead))
    segments.append(TaskSegment(template.kind, caption.text, ()))
    if template.needs_region:
        assert caption.region is not None
        segments.append(GroundingSegment(caption.region))
    return serialize(segments)


def _record_id(*parts: object) -> str:
    material = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(material.encode("utf-8")).hexdigest()[:12]


def convert_sample(
    s: AnnotatedSample,
    template_id: "str | None" = None,
    templates: "Mapping[str, Template] | None" = None,
    caption_index: int = 0,
) -> ConversationRecord:
    table = templates if templates is not None else DEFAULT_TEMPLATES
    if template_id is None:
        template = _DEFAULT_BY_KIND.get(s.source_task)
        if template is None:
            raise TemplateMissing(f"no template for {s.source_task.value}")
    else:
        if template_id not in table:
            raise TemplateMissing(template_id)
        template = table[template_id]
        if template.kind is not s.source_task:
            raise TemplateMissing(
                f"template {template_id!r} is for {template.kind.value}, sample is {s.source_task.value}"
            )
    if not s.captions:
        raise InsufficientCaptions("sample has no captions")
    caption = s.captions[caption_index]
    if template.needs_region and caption.region is None:
        raise RegionRequired(f"template {template.id!r} needs a region, caption has none")
    return ConversationRecord(
        id=_record_id("convert", s.source_dataset, s.image_ref, template.id, caption_index, caption.text),
        turns=(
            Turn("user", template.user.format(caption=caption.text)),
            Turn("assistant", _assistant_content(template, caption)),
        ),
        task_kinds=frozenset({template.kind}),
    )


def build_multiturn(
    s: AnnotatedSample,
    n_turns: int,
    rng_seed: int,
    templates: "Mapping[str, Template] | None" = None,
) -> ConversationRecord:
    """Seeded dialogue synthesis: n_turns user/assistant rounds over the
    sample's captions, varying the task kind when more than one applies."""
    if n_turns < 1:
        raise ValueError("n_turns must be >= 1")
    if not s.captions:
        raise InsufficientCaptions("sample has no captions")
    table = templates if templates is not None else DEFAULT_TEMPLATES
    by_kind: dict[TaskKind, list[Template]] = {}
    for t in table.values():
        by_kind.setdefault(t.kind, []).append(t)
    for option in by_kind.values():
        option.sort(key=lambda t: t.id)

    rng = random.Random(rng_seed)
    turns: list[Turn] = []
    kinds: set[TaskKind] = set()
    previous: "TaskKind | None" = None
    for _ in range(n_turns):
        caption = rng.choice(s.captions)
        eligible = sorted(
            (k for k in by_kind if caption.region is not None or k not in REGION_REQUIRED),
            key=lambda k: k.value,
        )
        varied = [k for k in eligible if k is not previous]
        kind = rng.choice(varied or eligible)
        template = rng.choice(by_kind[kind])
        turns.append(Turn("user", template.user.format(caption=caption.text)))
        turns.append(Turn("assistant", _assistant_content(template, caption)))
        kinds.add(kind)
        previous = kind
    return ConversationRecord(
        id=_record_id("multiturn", s.source_dataset, s.image_ref, n_turns, rng_seed),
        turns=tuple(turns),
        task_kinds=frozenset(kinds),
    )


@dataclass(frozen=True)
class FilterReport:
    kept: int
    rejected: tuple[tuple[str, Violation], ...]

    def to_json_dict(self) -> dict:
        return {
            "kept": self.kept,
            "rejected": [
                {"id": record_id, "violation": v.to_json_dict()} for record_id, v in self.rejected
            ],
        }


def first_violation(record: ConversationRecord) -> "Violation | None":
    if not record.turns:
        return Violation(ROLE_ORDER, 0, "record has no turns")
    for idx, turn in enumerate(record.turns):
        expected = "user" if idx % 2 == 0 else "assistant"
        if turn.role != expected:
            return Violation(ROLE_ORDER, idx, f"turn {idx} has role {turn.role!r}, expected {expected!r}")
    for idx, turn in enumerate(record.turns):
        if turn.role != "assistant":
            continue
        try:
            msg = parse(turn.content)
        except MalformedToken as exc:
            return Violation(exc.code, exc.offset, f"turn {idx}: {exc.reason}")
        violations = validate(msg)
        if violations:
            v = violations[0]
            return Violation(v.code, v.offset, f"turn {idx}: {v.detail}")
    return None


def filter_records(records: Iterable[ConversationRecord]) -> FilterReport:
    kept = 0
    rejected: list[tuple[str, Violation]] = []
    for record in records:
        v = first_violation(record)
        if v is None:
            kept += 1
        else:
            rejected.append((record.id, v))
    return FilterReport(kept=kept, rejected=tuple(rejected))


def region_iou(a: Region, b: Region) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class DatasetStats:
    total: int
    by_kind: Mapping[str, int] = field(default_factory=dict)
    turns_histogram: Mapping[int, int] = field(default_factory=dict)
    regions_histogram: Mapping[int, int] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "total": self.total,
            "by_kind": dict(sorted(self.by_kind.items())),
            "turns_histogram": {str(k): v for k, v in sorted(self.turns_histogram.items())},
            "regions_histogram": {str(k): v for k, v in sorted(self.regions_histogram.items())},
        }


def dataset_stats(records: Sequence[ConversationRecord]) -> DatasetStats:
    by_kind = {kind.value: 0 for kind in TaskKind}
    turns_hist: dict[int, int] = {}
    regions_hist: dict[int, int] = {}
    for record in records:
        for kind in record.task_kinds:
            by_kind[kind.value] += 1
        turns_hist[len(record.turns)] = turns_hist.get(len(record.turns), 0) + 1
        n_regions = 0
        for turn in record.turns:
            if turn.role != "assistant":
                continue
            try:
                msg = parse(turn.content)
            except MalformedToken:
                continue
            n_regions += sum(1 for _ in iter_regions(msg.segments))
        regions_hist[n_regions] = regions_hist.get(n_regions, 0) + 1
    return DatasetStats(
        total=len(records),
        by_kind=by_kind,
        turns_histogram=turns_hist,
        regions_histogram=regions_hist,
    )


def write_records(records: Iterable[ConversationRecord], path: "str | Path") -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": RECORDS_FORMAT, "version": RECORDS_VERSION}) + "\n")
        for record in records:
            fh.write(json.dumps(record.to_json_dict(), sort_keys=True) + "\n")
            n += 1
    return n


def read_records(path: "str | Path") -> list[ConversationRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise DatasetFormatError("empty records file")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"bad header line: {exc}") from exc
        if not isinstance(header, dict) or header.get("format") != RECORDS_FORMAT:
            raise DatasetFormatError("not a conversation records file")
        if header.get("version") != RECORDS_VERSION:
            raise DatasetFormatError(f"unsupported records version {header.get('version')!r}")
        records = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                records.append(ConversationRecord.from_json_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"line {lineno}: {exc}") from exc
        return records


def read_samples(path: "str | Path") -> list[AnnotatedSample]:
    """Input JSONL, one sample per line:
    {image_ref, captions: [{text, box?: [x1,y1,x2,y2]}], source_task, source_dataset}
    """
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                captions = tuple(
                    Caption(
                        text=str(c["text"]),
                        region=Region(*c["box"]) if c.get("box") is not None else None,
                    )
                    for c in doc["captions"]
                )
                samples.append(
                    AnnotatedSample(
                        image_ref=str(doc["image_ref"]),
                        captions=captions,
                        source_task=TaskKind(doc["source_task"]),
                        source_dataset=str(doc["source_dataset"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"line {lineno}: {exc}") from exc
    return samples
