"""Durable document store with tag secondary indexes and a chunked blob store.

Layout of a store directory:

    MANIFEST            magic, format version, inline threshold, index list
    LOCK                flock'd by the single writable process
    segment-NNNNNN.log  append-only document log (see log.py)
    blobs/              chunk files, <blob_id>.<chunk_index>

Durability model: every mutation is one log frame (a batch of ops is one
frame, hence atomic). In-memory state is a per-key version chain tagged with
monotonically increasing sequence numbers, which gives snapshot reads for
paged scans. User documents are immutable after write; replacement and
deletion exist only for reserved system keys and for staged task outputs,
so index maintenance is add-only between compactions and scans re-verify
candidates against the snapshot.

Staged writes: a document put with a staging ``group`` stays invisible to
readers until the group is committed (one op, usually inside the same batch
that records the producing task's completion). That is the commit-marker
mechanism making task outputs appear all-or-nothing.
"""

from __future__ import annotations

import fcntl
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

from forge.clock import Clock, SystemClock
from forge.errors import (
    CorruptStore,
    DuplicateKey,
    InvalidArgument,
    NotFound,
    PayloadTooLarge,
    ReservedKey,
    StoreLocked,
)
from forge.query import MATCH_ALL, TagQuery, evaluate, sort_key, variant_of
from forge.store import log as logio
from forge.store import records
from forge.store.blob import BlobStore
from forge.store.types import (
    CODEC_ZLIB,
    DEFAULT_CHUNK_SIZE,
    DEFAULT_INLINE_THRESHOLD,
    SYSTEM_PREFIX,
    BlobPointer,
    Document,
    ScanCursor,
    validate_document,
)

MANIFEST_MAGIC = b"FGMF"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class PutOp:
    doc: Document
    replace: bool = False
    group: str | None = None


@dataclass(frozen=True)
class DeleteOp:
    key: str


@dataclass(frozen=True)
class CommitGroupOp:
    group: str


StoreOp = PutOp | DeleteOp | CommitGroupOp


class _State:
    """One visible version of a document."""

    __slots__ = ("doc", "group", "arrived_ms")

    def __init__(self, doc: Document, group: str | None, arrived_ms: int):
        self.doc = doc
        self.group = group
        self.arrived_ms = arrived_ms


class _Entry:
    """Version chain for one key: list of (seq, state-or-None) in seq order."""

    __slots__ = ("versions",)

    def __init__(self):
        self.versions: list[tuple[int, _State | None]] = []

    def latest(self) -> tuple[int, _State | None]:
        return self.versions[-1]

    def at(self, snapshot_seq: int) -> _State | None:
        for seq, state in reversed(self.versions):
            if seq <= snapshot_seq:
                return state
        return None


class _Index:
    """Secondary index for one tag: (variant, value) -> set of keys.

    Entries are added when a document carrying the tag is written and only
    dropped at compaction; scans re-verify candidates, so stale entries can
    produce false positives but never false negatives.
    """

    __slots__ = ("by_value", "_sorted", "_dirty")

    def __init__(self):
        self.by_value: dict[tuple, set[str]] = {}
        self._sorted: list[tuple] = []
        self._dirty = False

    def add(self, value, key: str) -> None:
        vk = sort_key(value)
        bucket = self.by_value.get(vk)
        if bucket is None:
            self.by_value[vk] = {key}
            self._dirty = True
        else:
            bucket.add(key)

    def sorted_values(self) -> list[tuple]:
        if self._dirty:
            self._sorted = sorted(self.by_value)
            self._dirty = False
        return self._sorted


class Store:
    """The single persistence substrate. One writable process per directory."""

    def __init__(self, path: str | os.PathLike, *, create: bool = False,
                 clock: Clock | None = None, fsync: bool = True,
                 inline_threshold: int = DEFAULT_INLINE_THRESHOLD):
        self.path = Path(path)
        self.clock = clock or SystemClock()
        self.fsync = fsync
        self._lock = threading.RLock()
        self._entries: dict[str, _Entry] = {}
        self._indexes: dict[str, _Index] = {}
        self._committed_groups: dict[str, int] = {}  # group -> commit seq
        self._next_seq = 1
        self._sorted_keys: list[str] = []
        self._keys_dirty = False
        self._closed = False

        manifest = self.path / "MANIFEST"
        if create:
            if manifest.exists():
                raise DuplicateKey(f"store already exists at {self.path}")
            self.path.mkdir(parents=True, exist_ok=True)
            self.inline_threshold = inline_threshold
            self._write_manifest(indexes=[])
        elif not manifest.exists():
            raise NotFound(f"no store at {self.path}")

        self._acquire_lock()
        index_names = self._read_manifest()
        for name in index_names:
            self._indexes[name] = _Index()
        self.blobs = BlobStore(self.path / "blobs", fsync=fsync)
        self._replay()
        self._log = logio.LogWriter(self.path, fsync=fsync)

    # -- lifecycle ----------------------------------------------------------

    def _acquire_lock(self) -> None:
        self._lock_file = open(self.path / "LOCK", "a+")
        try:
            fcntl.flock(self._lock_file.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            self._lock_file.close()
            raise StoreLocked(f"store at {self.path} is opened writable by another process")
        self._lock_file.seek(0)
        self._lock_file.truncate()
        self._lock_file.write(str(os.getpid()))
        self._lock_file.flush()

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            self._log.close()
            fcntl.flock(self._lock_file.fileno(), fcntl.LOCK_UN)
            self._lock_file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _write_manifest(self, indexes: list[str]) -> None:
        buf = bytearray()
        buf += MANIFEST_MAGIC
        buf += struct.pack("<I", FORMAT_VERSION)
        buf += struct.pack("<Q", self.inline_threshold)
        buf += struct.pack("<H", len(indexes))
        for name in indexes:
            raw = name.encode("utf-8")
            buf += struct.pack("<H", len(raw)) + raw
        tmp = self.path / "MANIFEST.tmp"
        tmp.write_bytes(bytes(buf))
        os.replace(tmp, self.path / "MANIFEST")

    def _read_manifest(self) -> list[str]:
        raw = (self.path / "MANIFEST").read_bytes()
        if raw[:4] != MANIFEST_MAGIC:
            raise CorruptStore("bad manifest magic")
        version = struct.unpack_from("<I", raw, 4)[0]
        if version != FORMAT_VERSION:
            raise CorruptStore(f"unsupported format version {version}")
        self.inline_threshold = struct.unpack_from("<Q", raw, 8)[0]
        count = struct.unpack_from("<H", raw, 16)[0]
        names, off = [], 18
        for _ in range(count):
            n = struct.unpack_from("<H", raw, off)[0]
            off += 2
            names.append(raw[off:off + n].decode("utf-8"))
            off += n
        return names

    def _replay(self) -> None:
        for body in logio.replay(self.path):
            for op in records.decode_body(body):
                self._apply(op)

    # -- in-memory application ------------------------------------------------

    def _apply(self, op: records.DecodedOp) -> None:
        if op.op in (records.OP_PUT, records.OP_REPLACE):
            entry = self._entries.get(op.doc.key)
            if entry is None:
                entry = self._entries[op.doc.key] = _Entry()
                self._keys_dirty = True
            entry.versions.append((op.seq, _State(op.doc, op.group, op.arrived_ms)))
            self._index_doc(op.doc)
        elif op.op == records.OP_DELETE:
            entry = self._entries.get(op.key)
            if entry is not None:
                entry.versions.append((op.seq, None))
        elif op.op == records.OP_COMMIT_GROUP:
            self._committed_groups[op.group] = op.seq
        elif op.op == records.OP_SNAPSHOT:
            self._next_seq = max(self._next_seq, op.next_seq)
        if op.seq >= self._next_seq:
            self._next_seq = op.seq + 1

    def _index_doc(self, doc: Document) -> None:
        if doc.key.startswith(SYSTEM_PREFIX) or not self._indexes:
            return
        for name, value in doc.tags.items():
            index = self._indexes.get(name)
            if index is not None:
                index.add(value, doc.key)

    # -- visibility -----------------------------------------------------------

    def _visible(self, state: _State | None, snapshot_seq: int) -> bool:
        if state is None:
            return False
        if state.group is None:
            return True
        commit_seq = self._committed_groups.get(state.group)
        return commit_seq is not None and commit_seq <= snapshot_seq

    def _state_at(self, key: str, snapshot_seq: int) -> _State | None:
        entry = self._entries.get(key)
        if entry is None:
            return None
        state = entry.at(snapshot_seq)
        return state if self._visible(state, snapshot_seq) else None

    def snapshot_seq(self) -> int:
        with self._lock:
            return self._next_seq - 1

    # -- mutations ------------------------------------------------------------

    def put(self, doc: Document) -> str:
        """Public write path: immutable user documents, no system prefix."""
        if doc.key.startswith(SYSTEM_PREFIX):
            raise ReservedKey(f"keys under {SYSTEM_PREFIX!r} are reserved")
        if doc.is_inline and len(doc.payload) > self.inline_threshold:
            raise PayloadTooLarge(
                f"inline payload of {len(doc.payload)} bytes exceeds the "
                f"{self.inline_threshold}-byte threshold; use put_blob")
        self.apply_ops([PutOp(doc)])
        return doc.key

    def put_system(self, doc: Document, *, replace: bool = False) -> None:
        if not doc.key.startswith(SYSTEM_PREFIX):
            raise InvalidArgument("put_system is for reserved keys only")
        self.apply_ops([PutOp(doc, replace=replace)])

    def delete_system(self, key: str) -> None:
        if not key.startswith(SYSTEM_PREFIX):
            raise InvalidArgument("delete_system is for reserved keys only")
        self.apply_ops([DeleteOp(key)])

    def apply_ops(self, ops: list[StoreOp]) -> None:
        """Validate and apply a list of ops as one atomic, durable record."""
        if not ops:
            return
        with self._lock:
            if self._closed:
                raise InvalidArgument("store is closed")
            self._validate_ops(ops)
            now = self.clock.now_ms()
            bodies = []
            decoded: list[records.DecodedOp] = []
            seq = self._next_seq
            for op in ops:
                if isinstance(op, PutOp):
                    kind = records.OP_REPLACE if op.replace else records.OP_PUT
                    bodies.append(records.encode_doc_op(kind, seq, now, op.group, op.doc))
                    decoded.append(records.DecodedOp(kind, seq=seq, arrived_ms=now,
                                                     group=op.group, doc=op.doc))
                elif isinstance(op, DeleteOp):
                    bodies.append(records.encode_delete(seq, op.key))
                    decoded.append(records.DecodedOp(records.OP_DELETE, seq=seq, key=op.key))
                else:
                    bodies.append(records.encode_commit_group(seq, op.group))
                    decoded.append(records.DecodedOp(records.OP_COMMIT_GROUP, seq=seq,
                                                     group=op.group))
                seq += 1
            body = bodies[0] if len(bodies) == 1 else records.encode_batch(bodies)
            self._log.append(body)
            for op in decoded:
                self._apply(op)

    def _validate_ops(self, ops: list[StoreOp]) -> None:
        staged_new = set()
        for op in ops:
            if isinstance(op, PutOp):
                validate_document(op.doc)
                entry = self._entries.get(op.doc.key)
                current = entry.latest()[1] if entry and entry.versions else None
                exists = current is not None
                if exists and not op.replace:
                    # overwriting an uncommitted staged version of the same
                    # group is the deterministic-replay path and is allowed
                    same_stage = (current.group is not None
                                  and current.group not in self._committed_groups
                                  and current.group == op.group)
                    if not (same_stage or op.doc.key in staged_new):
                        raise DuplicateKey(f"document key {op.doc.key!r} already exists")
                if op.group is not None:
                    staged_new.add(op.doc.key)
            elif isinstance(op, DeleteOp):
                if op.key not in self._entries:
                    raise NotFound(f"document {op.key!r} not found")
            elif isinstance(op, CommitGroupOp):
                pass
            else:
                raise InvalidArgument(f"unknown store op {op!r}")

    # -- reads ----------------------------------------------------------------

    def get(self, key: str) -> Document:
        with self._lock:
            state = self._state_at(key, self._next_seq - 1)
            if state is None:
                raise NotFound(f"document {key!r} not found")
            return state.doc

    def get_meta(self, key: str) -> tuple[int, int]:
        """(seq, arrived_ms) of the key's visible version."""
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                raise NotFound(f"document {key!r} not found")
            seq, state = entry.latest()
            if not self._visible(state, self._next_seq - 1):
                raise NotFound(f"document {key!r} not found")
            return seq, state.arrived_ms

    def exists(self, key: str) -> bool:
        with self._lock:
            return self._state_at(key, self._next_seq - 1) is not None

    def _all_keys_sorted(self) -> list[str]:
        if self._keys_dirty:
            self._sorted_keys = sorted(self._entries)
            self._keys_dirty = False
        return self._sorted_keys

    def keys_with_prefix(self, prefix: str) -> list[str]:
        """Visible keys under a prefix, ascending. System keys included."""
        with self._lock:
            snap = self._next_seq - 1
            out = []
            for key in self._all_keys_sorted():
                if key.startswith(prefix) and self._state_at(key, snap) is not None:
                    out.append(key)
            return out

    # -- index management -------------------------------------------------

    def create_index(self, tag_name: str) -> None:
        """Build (or no-op re-build) the secondary index for one tag."""
        if not tag_name or not isinstance(tag_name, str):
            raise InvalidArgument("tag name must be a non-empty string")
        with self._lock:
            if tag_name in self._indexes:
                return
            index = _Index()
            for key, entry in self._entries.items():
                if key.startswith(SYSTEM_PREFIX):
                    continue
                for _, state in entry.versions:
                    if state is not None and tag_name in state.doc.tags:
                        index.add(state.doc.tags[tag_name], key)
            self._indexes[tag_name] = index
            self._write_manifest(sorted(self._indexes))

    def indexes(self) -> list[str]:
        with self._lock:
            return sorted(self._indexes)

    # -- scan ---------------------------------------------------------------

    def scan(self, query: TagQuery, cursor: ScanCursor | None = None,
             limit: int | None = None, *, use_index: bool = True) -> tuple[list[str], ScanCursor | None]:
        """Matching visible document keys in ascending key order.

        Pages taken with the returned cursor all read at the snapshot of the
        first call; their concatenation equals a single unbounded scan at
        that snapshot. System keys never appear.
        """
        if limit is not None and limit < 1:
            raise InvalidArgument("limit must be positive")
        with self._lock:
            if cursor is None:
                snap = self._next_seq - 1
                after = ""
            else:
                snap = cursor.snapshot_seq
                after = cursor.last_key
            candidates = self._candidates(query, snap) if use_index else None
            keys = candidates if candidates is not None else self._all_keys_sorted()

            out: list[str] = []
            last = after
            exhausted = True
            for key in keys:
                if key <= after or key.startswith(SYSTEM_PREFIX):
                    continue
                state = self._state_at(key, snap)
                if state is None:
                    continue
                if not query.is_match_all and not evaluate(query, state.doc.tags):
                    continue
                if limit is not None and len(out) >= limit:
                    exhausted = False
                    break
                out.append(key)
                last = key
            if exhausted:
                return out, None
            return out, ScanCursor(snapshot_seq=snap, last_key=last)

    def _candidates(self, query: TagQuery, snap: int) -> list[str] | None:
        """Keys from the best covering index, sorted; None = no usable index."""
        best: set[str] | None = None
        for pred in query.predicates:
            index = self._indexes.get(pred.tag)
            if index is None or pred.op == "!=":
                continue
            if pred.op == "=":
                bucket = index.by_value.get(sort_key(pred.value), ())
                found: set[str] = set(bucket)
            elif pred.op == "IN":
                found = set()
                for v in pred.values:
                    found |= index.by_value.get(sort_key(v), set())
            else:
                found = self._range_lookup(index, pred)
            if best is None or len(found) < len(best):
                best = found
            if best is not None and not best:
                break
        if best is None:
            return None
        return sorted(best)

    @staticmethod
    def _range_lookup(index: _Index, pred) -> set[str]:
        import bisect

        variant = variant_of(pred.value)
        values = index.sorted_values()
        lo = bisect.bisect_left(values, (variant,))
        hi = bisect.bisect_left(values, (variant + 1,))
        vk = sort_key(pred.value)
        if pred.op == "<":
            hi = min(hi, bisect.bisect_left(values, vk, lo, hi))
        elif pred.op == "<=":
            hi = min(hi, bisect.bisect_right(values, vk, lo, hi))
        elif pred.op == ">":
            lo = max(lo, bisect.bisect_right(values, vk, lo, hi))
        elif pred.op == ">=":
            lo = max(lo, bisect.bisect_left(values, vk, lo, hi))
        found: set[str] = set()
        for i in range(lo, hi):
            found |= index.by_value[values[i]]
        return found

    # -- blobs ----------------------------------------------------------------

    def put_blob(self, data: bytes, chunk_size: int = DEFAULT_CHUNK_SIZE,
                 codec_id: int = CODEC_ZLIB) -> BlobPointer:
        return self.blobs.put(data, chunk_size, codec_id)

    def get_blob(self, ptr: BlobPointer) -> bytes:
        return self.blobs.get(ptr)

    # -- compaction -------------------------------------------------------

    def compact(self) -> None:
        """Rewrite live state into a fresh snapshot segment.

        Drops tombstones and superseded versions, folds committed staging
        groups into plain documents, and garbage-collects unreferenced blob
        chunks. Open scan cursors from before the compaction stay valid
        because surviving versions keep their sequence numbers.
        """
        with self._lock:
            self._log.close()
            number = logio.segment_number(logio.list_segments(self.path)[-1]) + 1
            tmp = self.path / f"segment-{number:06d}.log.tmp"
            live_blobs: set[str] = set()
            snap = self._next_seq - 1
            with open(tmp, "wb") as f:
                f.write(logio.frame(records.encode_snapshot_marker(self._next_seq)))
                for key in sorted(self._entries):
                    entry = self._entries[key]
                    seq, state = entry.latest()
                    if state is None:
                        continue
                    group = state.group
                    if group is not None and group in self._committed_groups:
                        group = None
                    body = records.encode_doc_op(records.OP_PUT, seq, state.arrived_ms,
                                                 group, state.doc)
                    f.write(logio.frame(body))
                    if not state.doc.is_inline:
                        live_blobs.add(state.doc.payload.blob_id)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, logio.segment_path(self.path, number))
            for path in logio.list_segments(self.path)[:-1]:
                path.unlink()
            # rebuild in-memory state to shed history
            kept_groups = {g: s for g, s in self._committed_groups.items()}
            self._entries = {}
            self._committed_groups = {}
            self._keys_dirty = True
            next_seq = self._next_seq
            for name in list(self._indexes):
                self._indexes[name] = _Index()
            self._replay()
            self._next_seq = max(self._next_seq, next_seq)
            # groups committed before compaction were folded in; uncommitted
            # staged docs keep their group and still need a commit op later
            del kept_groups
            self.blobs.collect_garbage(live_blobs)
            self._log = logio.LogWriter(self.path, fsync=self.fsync)
