"""Task-token and grounding-token grammar: parsing, streaming, validation.

A model reply in the unified representation is plain text interleaved with two
families of paired tags:

* task tokens ``<Name>payload</Name>`` naming the task to execute, where
  ``Name`` comes from the closed :class:`TaskKind` table;
* grounding tokens ``<box>[x1,y1,x2,y2]</box>`` carrying a normalized
  rectangle (fractions of image width/height, serialized to 3 decimals).

Grammar rules fixed here:

* task spans never nest; grounding spans contain no tags;
* a grounding token inside a task span belongs to that task's region list;
  one that follows a task span with only whitespace between them stays a
  standalone segment but *attaches* to the preceding task for validation and
  routing (see :func:`effective_regions`);
* a tag-shaped ``<`` sequence with an unknown name is an error, never silently
  text; a ``<`` that cannot open a tag (followed by space, digit, punctuation,
  or end of input) is literal text.

Offsets reported by errors and carried on segments are character offsets into
the decoded input string.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum, unique
from typing import Iterable, Sequence, Union


@unique
class TaskKind(Enum):
    """Closed enumeration of routable task types."""

    IMAGE_GEN = "ImageGen"
    LAYOUT_GEN = "LayoutGen"
    IMAGE_EDIT_GLOBAL = "ImageEditGlobal"
    IMAGE_EDIT_REGION = "ImageEditRegion"
    IMAGE_SEG = "ImageSeg"
    VIDEO_SEG = "VideoSeg"
    VIDEO_GEN = "VideoGen"
    VIDEO_EDIT = "VideoEdit"
    IMAGE_TO_VIDEO = "ImageToVideo"
    AUDIO_GEN = "AudioGen"


TAG_BY_KIND: dict[TaskKind, str] = {
    TaskKind.IMAGE_GEN: "Gen",
    TaskKind.LAYOUT_GEN: "Layout",
    TaskKind.IMAGE_EDIT_GLOBAL: "GlobalEdit",
    TaskKind.IMAGE_EDIT_REGION: "Edit",
    TaskKind.IMAGE_SEG: "Seg",
    TaskKind.VIDEO_SEG: "VSeg",
    TaskKind.VIDEO_GEN: "VGen",
    TaskKind.VIDEO_EDIT: "VEdit",
    TaskKind.IMAGE_TO_VIDEO: "I2V",
    TaskKind.AUDIO_GEN: "AGen",
}

KIND_BY_TAG: dict[str, TaskKind] = {tag: kind for kind, tag in TAG_BY_KIND.items()}
if len(KIND_BY_TAG) != len(TAG_BY_KIND):  # pragma: no cover
    raise AssertionError("task tag names must be bijective")

BOX_TAG = "box"

#: Kinds whose invocation is meaningless without at least one region.
REGION_REQUIRED: frozenset[TaskKind] = frozenset(
    {
        TaskKind.IMAGE_EDIT_REGION,
        TaskKind.IMAGE_SEG,
        TaskKind.VIDEO_SEG,
        TaskKind.LAYOUT_GEN,
    }
)

# Violation codes (JSON-stable identifiers).
MISSING_REGION = "missing-region"
EMBEDDED_MARKUP = "embedded-markup"
NONCANONICAL_TEXT = "noncanonical-text"
MALFORMED_TOKEN = "malformed-token"
INVALID_REGION_CODE = "invalid-region"


class MalformedToken(ValueError):
    """Input violates the token grammar.

    ``offset`` is the character offset of the offending construct in the
    original input; ``reason`` is a short human-readable explanation.
    """

    code = MALFORMED_TOKEN

    def __init__(self, offset: int, reason: str):
        super().__init__(f"offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class InvalidRegion(MalformedToken):
    """A grounding-span interior is not a valid normalized box."""

    code = INVALID_REGION_CODE


class InvalidSegment(ValueError):
    """A hand-built segment violates its invariants and cannot be serialized."""


@dataclass(frozen=True)
class Region:
    """Normalized rectangle; coordinates are fractions of width/height."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not 0.0 <= float(v) <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.x2 < self.x1:
            raise ValueError(f"x2={self.x2} < x1={self.x1}")
        if self.y2 < self.y1:
            raise ValueError(f"y2={self.y2} < y1={self.y1}")

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class TextSegment:
    content: str
    start: int = field(default=-1, compare=False)
    end: int = field(default=-1, compare=False)


@dataclass(frozen=True)
class TaskSegment:
    kind: TaskKind
    payload: str
    regions: tuple[Region, ...] = ()
    start: int = field(default=-1, compare=False)
    end: int = field(default=-1, compare=False)


@dataclass(frozen=True)
class GroundingSegment:
    region: Region
    start: int = field(default=-1, compare=False)
    end: int = field(default=-1, compare=False)


Segment = Union[TextSegment, TaskSegment, GroundingSegment]


@dataclass(frozen=True)
class ParsedMessage:
    """A reply decomposed into text, task, and grounding segments."""

    segments: tuple[Segment, ...]
    raw: str = ""


@dataclass(frozen=True)
class Violation:
    """One well-formedness defect; violations are data, not exceptions."""

    code: str
    offset: int
    detail: str

    def to_json_dict(self) -> dict:
        return {"code": self.code, "offset": self.offset, "detail": self.detail}


_NUMBER_RE = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)\Z")


def parse_region(text: str) -> Region:
    """Parse the interior of a grounding span, e.g. ``[0.1,0.2,0.5,0.6]``.

    Accepts any decimal precision and surrounding whitespace. Raises
    :class:`InvalidRegion` (offset relative to ``text``) on wrong arity,
    non-numeric coordinates, out-of-range values, or inverted corners.
    """
    s = text.strip()
    if not (s.startswith("[") and s.endswith("]") and len(s) >= 2):
        raise InvalidRegion(0, "region must be written as [x1,y1,x2,y2]")
    parts = s[1:-1].split(",")
    if len(parts) != 4:
        raise InvalidRegion(0, f"expected 4 coordinates, got {len(parts)}")
    values = []
    for part in parts:
        p = part.strip()
        if not _NUMBER_RE.match(p):
            raise InvalidRegion(0, f"coordinate {p!r} is not a number")
        values.append(float(p))
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise InvalidRegion(0, f"coordinate {v} out of range [0, 1]")
    x1, y1, x2, y2 = values
    if x2 < x1:
        raise InvalidRegion(0, f"x2={x2} < x1={x1}")
    if y2 < y1:
        raise InvalidRegion(0, f"y2={y2} < y1={y1}")
    return Region(x1, y1, x2, y2)


def format_region(region: Region) -> str:
    """Canonical 3-decimal form, e.g. ``[0.320,0.410,0.780,0.950]``."""
    return f"[{region.x1:.3f},{region.y1:.3f},{region.x2:.3f},{region.y2:.3f}]"


# --------------------------------------------------------------------------
# Streaming parser
# --------------------------------------------------------------------------

# Tag names are ASCII, start with a letter, and are short; the cap bounds
# buffering when an adversarial stream never closes a tag.
_MAX_TAG_NAME = 32
_OPEN_RE = re.compile(r"<([A-Za-z][A-Za-z0-9]*)")
_CLOSE_RE = re.compile(r"</([A-Za-z0-9]*)")
_BOX_CLOSE = "</" + BOX_TAG + ">"

_MODE_TEXT = 0
_MODE_TASK = 1
_MODE_BOX = 2


class StreamParser:
    """Incremental parser over chunks of model output.

    :meth:`feed` consumes a chunk and returns every segment whose end became
    known; :meth:`finish` flushes trailing text and raises
    :class:`MalformedToken` for dangling open constructs. Feeding a string in
    any chunking yields the same segment sequence as :func:`parse` on the
    whole string. After an error the parser is unusable; start a new one.
    """

    def __init__(self):
        self._buf = ""
        self._base = 0  # absolute offset of _buf[0]
        self._mode = _MODE_TEXT
        self._text_parts: list[str] = []
        self._text_start = 0
        self._task_kind: TaskKind | None = None
        self._task_start = 0
        self._payload_parts: list[str] = []
        self._task_regions: list[Region] = []
        self._box_parts: list[str] = []
        self._box_start = 0
        self._box_in_task = False
        self._error: MalformedToken | None = None
        self._finished = False

    # -- accumulation helpers ------------------------------------------------

    def _take_text(self, piece: str, at: int) -> None:
        if not piece:
            return
        if self._mode == _MODE_TASK:
            self._payload_parts.append(piece)
        else:
            if not self._text_parts:
                self._text_start = at
            self._text_parts.append(piece)

    def _flush_text(self, out: list[Segment]) -> None:
        if self._text_parts:
            content = "".join(self._text_parts)
            out.append(TextSegment(content, self._text_start, self._text_start + len(content)))
            self._text_parts = []

    def _fail(self, offset: int, reason: str, cls: type = MalformedToken) -> MalformedToken:
        err = cls(offset, reason)
        self._error = err
        return err

    # -- tag handling ----------------------------------------------------------

    def _handle_open(self, name: str, start_abs: int, out: list[Segment]) -> None:
        if name == BOX_TAG:
            self._box_in_task = self._mode == _MODE_TASK
            if not self._box_in_task:
                self._flush_text(out)
            self._mode = _MODE_BOX
            self._box_start = start_abs
            self._box_parts = []
            return
        kind = KIND_BY_TAG.get(name)
        if kind is None:
            raise self._fail(start_abs, f"unknown tag <{name}>")
        if self._mode == _MODE_TASK:
            raise self._fail(start_abs, f"nested task tag <{name}> inside open span")
        self._flush_text(out)
        self._mode = _MODE_TASK
        self._task_kind = kind
        self._task_start = start_abs
        self._payload_parts = []
        self._task_regions = []

    def _handle_close(self, name: str, start_abs: int, end_abs: int, out: list[Segment]) -> None:
        if name == BOX_TAG:
            # reachable only outside a box; the box interior consumes its own close
            raise self._fail(start_abs, "unmatched </box>")
        kind = KIND_BY_TAG.get(name)
        if kind is None:
            raise self._fail(start_abs, f"unknown tag </{name}>")
        if self._mode != _MODE_TASK:
            raise self._fail(start_abs, f"unmatched close tag </{name}>")
        if kind is not self._task_kind:
            open_tag = TAG_BY_KIND[self._task_kind]
            raise self._fail(start_abs, f"close tag </{name}> does not match open <{open_tag}>")
        out.append(
            TaskSegment(
                kind=kind,
                payload="".join(self._payload_parts),
                regions=tuple(self._task_regions),
                start=self._task_start,
                end=end_abs,
            )
        )
        self._mode = _MODE_TEXT
        self._task_kind = None
        self._payload_parts = []
        self._task_regions = []

    def _close_box(self, interior_end: int, out: list[Segment]) -> None:
        interior = "".join(self._box_parts)
        interior_start = self._box_start + len("<box>")
        try:
            region = parse_region(interior)
        except InvalidRegion as err:
            raise self._fail(interior_start + err.offset, err.reason, InvalidRegion)
        end_abs = interior_end + len(_BOX_CLOSE)
        if self._box_in_task:
            self._mode = _MODE_TASK
            self._task_regions.append(region)
        else:
            self._mode = _MODE_TEXT
            out.append(GroundingSegment(region, self._box_start, end_abs))
        self._box_parts = []

    # -- public API ------------------------------------------------------------

    def feed(self, chunk: str) -> list[Segment]:
        if self._error is not None:
            raise self._error
        if self._finished:
            raise RuntimeError("cannot feed a finished parser")
        self._buf += chunk
        out: list[Segment] = []
        buf = self._buf
        i = 0
        n = len(buf)
        while i < n:
            if self._mode == _MODE_BOX:
                k = buf.find("<", i)
                if k == -1:
                    self._box_parts.append(buf[i:])
                    i = n
                    break
                self._box_parts.append(buf[i:k])
                i = k
                rest = buf[k : k + len(_BOX_CLOSE)]
                if rest == _BOX_CLOSE:
                    self._close_box(self._base + k, out)
                    i = k + len(_BOX_CLOSE)
                    continue
                if len(rest) < len(_BOX_CLOSE) and _BOX_CLOSE.startswith(rest):
                    break  # may complete in a later chunk
                raise self._fail(self._base + k, "grounding span may not contain tags")

            k = buf.find("<", i)
            if k == -1:
                self._take_text(buf[i:], self._base + i)
                i = n
                break
            self._take_text(buf[i:k], self._base + i)
            i = k
            if k + 1 >= n:
                break  # lone '<' at buffer end: undecidable yet
            c = buf[k + 1]
            if c == "/":
                m = _CLOSE_RE.match(buf, k)
                name = m.group(1)
                if len(name) > _MAX_TAG_NAME:
                    raise self._fail(self._base + k, f"unknown tag </{name[:_MAX_TAG_NAME]}...>")
                after = m.end()
                if after >= n:
                    break  # name may continue in a later chunk
                if buf[after] != ">":
                    raise self._fail(self._base + k, "malformed tag")
                self._handle_close(name, self._base + k, self._base + after + 1, out)
                i = after + 1
            elif c.isascii() and c.isalpha():
                m = _OPEN_RE.match(buf, k)
                name = m.group(1)
                if len(name) > _MAX_TAG_NAME:
                    raise self._fail(self._base + k, f"unknown tag <{name[:_MAX_TAG_NAME]}...>")
                after = m.end()
                if after >= n:
                    break
                if buf[after] != ">":
                    raise self._fail(self._base + k, "malformed tag")
                self._handle_open(name, self._base + k, out)
                i = after + 1
            else:
                # '<' that cannot open a tag is literal text
                self._take_text("<", self._base + k)
                i = k + 1
        self._base += i
        self._buf = buf[i:]
        return out

    def finish(self) -> list[Segment]:
        """Flush remaining input; raises for dangling open constructs."""
        if self._error is not None:
            raise self._error
        if self._finished:
            raise RuntimeError("parser already finished")
        self._finished = True
        out: list[Segment] = []
        if self._mode == _MODE_BOX:
            raise self._fail(self._box_start, "unclosed grounding span")
        if self._buf:
            if self._buf == "<":
                self._take_text("<", self._base)
                self._base += 1
                self._buf = ""
            else:
                raise self._fail(self._base, "unterminated tag")
        if self._mode == _MODE_TASK:
            tag = TAG_BY_KIND[self._task_kind]
            raise self._fail(self._task_start, f"unclosed task span <{tag}>")
        self._flush_text(out)
        return out


def parse(text: str) -> ParsedMessage:
    """Parse a complete reply; total over arbitrary strings.

    Returns a :class:`ParsedMessage` whose segments partition ``text``, or
    raises :class:`MalformedToken` (never anything else) when the input
    violates the grammar.
    """
    parser = StreamParser()
    segments = parser.feed(text)
    segments += parser.finish()
    return ParsedMessage(tuple(segments), raw=text)


# --------------------------------------------------------------------------
# Serialization and validation
# --------------------------------------------------------------------------

_MARKUP_RE = re.compile(r"<[A-Za-z/]")


def serialize(msg: ParsedMessage | Sequence[Segment]) -> str:
    """Render segments to canonical text (3-decimal region coordinates).

    For any message that passes :func:`validate`, ``parse(serialize(m))``
    yields a segment list equal to ``m.segments``.
    """
    segments = msg.segments if isinstance(msg, ParsedMessage) else msg
    parts: list[str] = []
    for seg in segments:
        if isinstance(seg, TextSegment):
            parts.append(seg.content)
        elif isinstance(seg, TaskSegment):
            tag = TAG_BY_KIND[seg.kind]
            parts.append(f"<{tag}>{seg.payload}")
            for region in seg.regions:
                parts.append(_format_box(region))
            parts.append(f"</{tag}>")
        elif isinstance(seg, GroundingSegment):
            parts.append(_format_box(seg.region))
        else:
            raise InvalidSegment(f"unknown segment type {type(seg).__name__}")
    return "".join(parts)


def _format_box(region: Region) -> str:
    if not isinstance(region, Region):
        raise InvalidSegment(f"expected Region, got {type(region).__name__}")
    if not (0.0 <= region.x1 <= region.x2 <= 1.0 and 0.0 <= region.y1 <= region.y2 <= 1.0):
        raise InvalidSegment(f"region {region} violates bounds")
    return f"<{BOX_TAG}>{format_region(region)}{_BOX_CLOSE}"


def effective_regions(segments: Sequence[Segment]) -> dict[int, tuple[Region, ...]]:
    """Regions each task carries: in-span ones plus attached trailing boxes.

    A run of grounding segments separated from a task span (and each other)
    only by whitespace attaches to that task. Keys are indices of task
    segments in ``segments``.
    """
    out: dict[int, tuple[Region, ...]] = {}
    n = len(segments)
    i = 0
    while i < n:
        seg = segments[i]
        if not isinstance(seg, TaskSegment):
            i += 1
            continue
        attached: list[Region] = []
        j = i + 1
        while j < n:
            nxt = segments[j]
            if isinstance(nxt, TextSegment) and nxt.content.strip() == "":
                j += 1
                continue
            if isinstance(nxt, GroundingSegment):
                attached.append(nxt.region)
                j += 1
                continue
            break
        out[i] = seg.regions + tuple(attached)
        i = max(j, i + 1)
    return out


def validate(msg: ParsedMessage) -> list[Violation]:
    """Check well-formedness; an empty list means the message is clean.

    Flags region-requiring tasks that carry no region (in-span or attached),
    text or payload content that would lex as markup on re-parse, and
    non-canonical text runs (empty or adjacent text segments).
    """
    violations: list[Violation] = []
    segments = msg.segments
    regions_by_task = effective_regions(segments)
    prev_text = False
    for idx, seg in enumerate(segments):
        if isinstance(seg, TextSegment):
            if seg.content == "":
                violations.append(
                    Violation(NONCANONICAL_TEXT, seg.start, f"segment {idx}: empty text segment")
                )
            elif prev_text:
                violations.append(
                    Violation(NONCANONICAL_TEXT, seg.start, f"segment {idx}: adjacent text segments")
                )
            if _MARKUP_RE.search(seg.content):
                violations.append(
                    Violation(EMBEDDED_MARKUP, seg.start, f"segment {idx}: text contains tag-like markup")
                )
            prev_text = True
            continue
        prev_text = False
        if isinstance(seg, TaskSegment):
            if _MARKUP_RE.search(seg.payload):
                violations.append(
                    Violation(EMBEDDED_MARKUP, seg.start, f"segment {idx}: payload contains tag-like markup")
                )
            if seg.kind in REGION_REQUIRED and not regions_by_task.get(idx):
                violations.append(
                    Violation(
                        MISSING_REGION,
                        seg.start,
                        f"segment {idx}: {seg.kind.value} requires at least one region",
                    )
                )
    return violations


def segment_to_json_dict(seg: Segment) -> dict:
    """JSON-friendly view of one segment (used by reports and the service)."""
    if isinstance(seg, TextSegment):
        return {"type": "text", "content": seg.content, "start": seg.start, "end": seg.end}
    if isinstance(seg, TaskSegment):
        return {
            "type": "task",
            "kind": seg.kind.value,
            "payload": seg.payload,
            "regions": [r.to_list() for r in seg.regions],
            "start": seg.start,
            "end": seg.end,
        }
    if isinstance(seg, GroundingSegment):
        return {"type": "grounding", "region": seg.region.to_list(), "start": seg.start, "end": seg.end}
    raise TypeError(f"unknown segment type {type(seg).__name__}")


def iter_regions(segments: Iterable[Segment]) -> Iterable[Region]:
    """All regions in lexical order, both in-span and standalone."""
    for seg in segments:
        if isinstance(seg, TaskSegment):
            yield from seg.regions
        elif isinstance(seg, GroundingSegment):
            yield seg.region
