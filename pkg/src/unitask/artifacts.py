"""Content-addressed artifact references and storage.

Expert outputs (images, videos, audio, masks, layouts) are identified by the
sha256 of their bytes plus a media kind. The store keeps bytes either in
memory or under a directory; identical content is written once.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path


class MediaKind(Enum):
    IMAGE = "image"
    VIDEO = "video"
    AUDIO = "audio"
    MASK = "mask"
    LAYOUT = "layout"


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_text(text: str) -> str:
    return digest_bytes(text.encode("utf-8"))


@dataclass(frozen=True)
class ArtifactRef:
    """Pointer to stored content: hash plus what kind of media it is."""

    digest: str
    media: MediaKind

    def to_json_dict(self) -> dict:
        return {"digest": self.digest, "media": self.media.value}

    @classmethod
    def from_json_dict(cls, d: dict) -> "ArtifactRef":
        return cls(digest=str(d["digest"]), media=MediaKind(d["media"]))


@dataclass(frozen=True)
class PendingArtifact:
    """Plan-local forward reference to the output of an earlier invocation.

    Used when a later task in the same plan consumes what an earlier task
    in that plan will produce; dispatch resolves it to a concrete ref.
    """

    ordinal: int
    media: MediaKind

    def to_json_dict(self) -> dict:
        return {"pending": self.ordinal, "media": self.media.value}

    @classmethod
    def from_json_dict(cls, d: dict) -> "PendingArtifact":
        return cls(ordinal=int(d["pending"]), media=MediaKind(d["media"]))


def ref_from_json_dict(d: dict) -> "ArtifactRef | PendingArtifact":
    if "pending" in d:
        return PendingArtifact.from_json_dict(d)
    return ArtifactRef.from_json_dict(d)


class MissingContent(KeyError):
    """The store holds no bytes for the requested reference."""


class ArtifactStore:
    """sha256-addressed blob store; in-memory unless given a root directory."""

    def __init__(self, root: "str | Path | None" = None):
        self._root = Path(root) if root is not None else None
        self._mem: dict[str, bytes] = {}
        if self._root is not None:
            self._root.mkdir(parents=True, exist_ok=True)

    def _path(self, ref: ArtifactRef) -> Path:
        assert self._root is not None
        d = self._root / ref.media.value
        return d / ref.digest

    def put(self, data: bytes, media: MediaKind) -> ArtifactRef:
        ref = ArtifactRef(digest=digest_bytes(data), media=media)
        if self._root is None:
            self._mem.setdefault(self._key(ref), data)
        else:
            path = self._path(ref)
            if not path.exists():
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(data)
        return ref

    def get(self, ref: ArtifactRef) -> bytes:
        if self._root is None:
            try:
                return self._mem[self._key(ref)]
            except KeyError:
                raise MissingContent(ref.digest) from None
        path = self._path(ref)
        if not path.exists():
            raise MissingContent(ref.digest)
        return path.read_bytes()

    def has(self, ref: ArtifactRef) -> bool:
        if self._root is None:
            return self._key(ref) in self._mem
        return self._path(ref).exists()

    @staticmethod
    def _key(ref: ArtifactRef) -> str:
        return ref.media.value + ":" + ref.digest
