"""Binary encoding of documents and log records. All integers little-endian."""

from __future__ import annotations

import struct

from forge.errors import CorruptStore
from forge.query import V_BOOL, V_FLOAT, V_INT, V_STRING, TagScalar, variant_of
from forge.store.types import BlobPointer, Document

# log record op codes
OP_PUT = 1
OP_REPLACE = 2
OP_DELETE = 3
OP_COMMIT_GROUP = 4
OP_BATCH = 5
OP_SNAPSHOT = 6

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v: int):
        self.parts.append(bytes([v]))

    def u16(self, v: int):
        self.parts.append(_U16.pack(v))

    def u32(self, v: int):
        self.parts.append(_U32.pack(v))

    def u64(self, v: int):
        self.parts.append(_U64.pack(v))

    def i64(self, v: int):
        self.parts.append(_I64.pack(v))

    def f64(self, v: float):
        self.parts.append(_F64.pack(v))

    def raw(self, b: bytes):
        self.parts.append(b)

    def str16(self, s: str):
        raw = s.encode("utf-8")
        self.u16(len(raw))
        self.raw(raw)

    def str32(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.raw(raw)

    def bytes32(self, b: bytes):
        self.u32(len(b))
        self.raw(b)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes, off: int = 0):
        self.buf = buf
        self.off = off

    def _take(self, n: int) -> bytes:
        end = self.off + n
        if end > len(self.buf):
            raise CorruptStore("truncated record")
        chunk = self.buf[self.off:end]
        self.off = end
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self._take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def i64(self) -> int:
        return _I64.unpack(self._take(8))[0]

    def f64(self) -> float:
        return _F64.unpack(self._take(8))[0]

    def str16(self) -> str:
        return self._take(self.u16()).decode("utf-8")

    def str32(self) -> str:
        return self._take(self.u32()).decode("utf-8")

    def bytes32(self) -> bytes:
        return self._take(self.u32())

    def done(self) -> bool:
        return self.off >= len(self.buf)


def write_tag_value(w: _Writer, value: TagScalar) -> None:
    code = variant_of(value)
    w.u8(code)
    if code == V_STRING:
        w.str32(value)
    elif code == V_INT:
        w.i64(value)
    elif code == V_FLOAT:
        w.f64(value)
    else:
        w.u8(1 if value else 0)


def read_tag_value(r: _Reader) -> TagScalar:
    code = r.u8()
    if code == V_STRING:
        return r.str32()
    if code == V_INT:
        return r.i64()
    if code == V_FLOAT:
        return r.f64()
    if code == V_BOOL:
        return bool(r.u8())
    raise CorruptStore(f"bad tag variant code {code}")


def write_tags(w: _Writer, tags: dict[str, TagScalar]) -> None:
    w.u16(len(tags))
    for name in sorted(tags):
        w.str16(name)
        write_tag_value(w, tags[name])


def read_tags(r: _Reader) -> dict[str, TagScalar]:
    return {r.str16(): read_tag_value(r) for _ in range(r.u16())}


def write_pointer(w: _Writer, ptr: BlobPointer) -> None:
    w.str16(ptr.blob_id)
    w.u64(ptr.total_size)
    w.u32(ptr.chunk_count)
    w.u32(ptr.chunk_size)
    w.u8(ptr.codec_id)
    w.raw(ptr.checksum)


def read_pointer(r: _Reader) -> BlobPointer:
    return BlobPointer(
        blob_id=r.str16(),
        total_size=r.u64(),
        chunk_count=r.u32(),
        chunk_size=r.u32(),
        codec_id=r.u8(),
        checksum=r._take(32),
    )


def encode_document(doc: Document) -> bytes:
    w = _Writer()
    w.str16(doc.key)
    if doc.is_inline:
        w.u8(0)
        w.bytes32(doc.payload)
    else:
        w.u8(1)
        write_pointer(w, doc.payload)
    if doc.label is None:
        w.u8(0)
    else:
        w.u8(1)
        w.str32(doc.label)
    write_tags(w, doc.tags)
    return w.getvalue()


def decode_document(buf: bytes, off: int = 0) -> Document:
    doc, _ = decode_document_at(buf, off)
    return doc


def decode_document_at(buf: bytes, off: int) -> tuple[Document, int]:
    r = _Reader(buf, off)
    key = r.str16()
    payload: bytes | BlobPointer
    if r.u8() == 0:
        payload = r.bytes32()
    else:
        payload = read_pointer(r)
    label = r.str32() if r.u8() else None
    tags = read_tags(r)
    return Document(key=key, payload=payload, label=label, tags=tags), r.off


# --- log record bodies ------------------------------------------------------
#
# Every mutation is one framed record (see log.py for framing). A record body
# is `u8 op` followed by op-specific fields. Document-bearing ops carry the
# assigned sequence number, arrival wall-clock ms, and an optional staging
# group ahead of the document encoding.


def encode_doc_op(op: int, seq: int, arrived_ms: int, group: str | None, doc: Document) -> bytes:
    w = _Writer()
    w.u8(op)
    w.u64(seq)
    w.u64(arrived_ms)
    if group is None:
        w.u8(0)
    else:
        w.u8(1)
        w.str16(group)
    w.raw(encode_document(doc))
    return w.getvalue()


def encode_delete(seq: int, key: str) -> bytes:
    w = _Writer()
    w.u8(OP_DELETE)
    w.u64(seq)
    w.str16(key)
    return w.getvalue()


def encode_commit_group(seq: int, group: str) -> bytes:
    w = _Writer()
    w.u8(OP_COMMIT_GROUP)
    w.u64(seq)
    w.str16(group)
    return w.getvalue()


def encode_snapshot_marker(next_seq: int) -> bytes:
    w = _Writer()
    w.u8(OP_SNAPSHOT)
    w.u64(next_seq)
    return w.getvalue()


def encode_batch(sub_bodies: list[bytes]) -> bytes:
    w = _Writer()
    w.u8(OP_BATCH)
    w.u16(len(sub_bodies))
    for body in sub_bodies:
        w.bytes32(body)
    return w.getvalue()


class DecodedOp:
    __slots__ = ("op", "seq", "arrived_ms", "group", "doc", "key", "next_seq")

    def __init__(self, op, seq=0, arrived_ms=0, group=None, doc=None, key=None, next_seq=0):
        self.op = op
        self.seq = seq
        self.arrived_ms = arrived_ms
        self.group = group
        self.doc = doc
        self.key = key
        self.next_seq = next_seq


def decode_body(body: bytes) -> list[DecodedOp]:
    """Decode a record body into its flat list of ops (batches are inlined)."""
    r = _Reader(body)
    op = r.u8()
    if op == OP_BATCH:
        ops = []
        for _ in range(r.u16()):
            ops.extend(decode_body(r.bytes32()))
        return ops
    if op in (OP_PUT, OP_REPLACE):
        seq = r.u64()
        arrived = r.u64()
        group = r.str16() if r.u8() else None
        doc, _ = decode_document_at(r.buf, r.off)
        return [DecodedOp(op, seq=seq, arrived_ms=arrived, group=group, doc=doc)]
    if op == OP_DELETE:
        return [DecodedOp(op, seq=r.u64(), key=r.str16())]
    if op == OP_COMMIT_GROUP:
        return [DecodedOp(op, seq=r.u64(), group=r.str16())]
    if op == OP_SNAPSHOT:
        return [DecodedOp(op, next_seq=r.u64())]
    raise CorruptStore(f"unknown log op {op}")
