"""Core value types of the document/blob store."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from forge.errors import InvalidArgument
from forge.query import TagScalar, check_tag_value

SYSTEM_PREFIX = "__sys/"

DEFAULT_INLINE_THRESHOLD = 16 * 1024
DEFAULT_CHUNK_SIZE = 256 * 1024
MIN_CHUNK_SIZE = 4 * 1024
MAX_CHUNK_SIZE = 4 * 1024 * 1024

CODEC_NONE = 0
CODEC_ZLIB = 1  # the project-standard lossless codec

MAX_KEY_BYTES = 4096
MAX_TAGS = 64


@dataclass(frozen=True)
class BlobPointer:
    """Index-row reference into the chunked blob store."""

    blob_id: str
    total_size: int
    chunk_count: int
    chunk_size: int
    codec_id: int
    checksum: bytes  # sha-256 of the uncompressed payload

    def __post_init__(self):
        if self.chunk_count != ceil_div(self.total_size, self.chunk_size):
            raise InvalidArgument("chunk_count does not match ceil(total_size / chunk_size)")
        if len(self.checksum) != 32:
            raise InvalidArgument("checksum must be a 32-byte digest")
        if self.codec_id not in (CODEC_NONE, CODEC_ZLIB):
            raise InvalidArgument(f"unknown codec_id {self.codec_id}")


@dataclass(frozen=True)
class Document:
    """One sample/prediction row: key, payload (inline bytes or blob pointer),
    optional label, and a tag map."""

    key: str
    payload: bytes | BlobPointer
    label: str | None = None
    tags: dict[str, TagScalar] = field(default_factory=dict)

    @property
    def is_inline(self) -> bool:
        return isinstance(self.payload, bytes)


@dataclass(frozen=True)
class ScanCursor:
    """Resumption token for paged scans; pages all read at ``snapshot_seq``."""

    snapshot_seq: int
    last_key: str


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def checksum_of(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def blob_id_for(checksum: bytes, chunk_size: int, codec_id: int) -> str:
    """Deterministic blob id: identical content + parameters dedupe to one blob."""
    h = hashlib.sha256()
    h.update(checksum)
    h.update(chunk_size.to_bytes(8, "little"))
    h.update(bytes([codec_id]))
    return h.hexdigest()[:32]


def validate_key(key: str) -> None:
    if not isinstance(key, str) or not key:
        raise InvalidArgument("document key must be a non-empty string")
    try:
        raw = key.encode("utf-8")
    except UnicodeEncodeError:
        raise InvalidArgument("document key must be UTF-8 encodable") from None
    if len(raw) > MAX_KEY_BYTES:
        raise InvalidArgument(f"document key exceeds {MAX_KEY_BYTES} bytes")


def validate_tags(tags: dict[str, TagScalar]) -> None:
    if len(tags) > MAX_TAGS:
        raise InvalidArgument(f"tag map has {len(tags)} entries; limit is {MAX_TAGS}")
    for name, value in tags.items():
        if not isinstance(name, str) or not name:
            raise InvalidArgument("tag names must be non-empty strings")
        if not all(33 <= ord(c) <= 126 for c in name):
            raise InvalidArgument(f"tag name {name!r} must be ASCII without whitespace")
        check_tag_value(value)


def validate_document(doc: Document) -> None:
    validate_key(doc.key)
    if not isinstance(doc.payload, (bytes, BlobPointer)):
        raise InvalidArgument("payload must be bytes or a BlobPointer")
    if doc.label is not None and not isinstance(doc.label, str):
        raise InvalidArgument("label must be a string when present")
    validate_tags(doc.tags)
