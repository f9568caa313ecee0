"""Model registry: immutable architecture specs, versioned parameter states,
and the append-only event log.

A version's state lives in the blob store; the version document's payload IS
the blob pointer, so compaction's pointer-occurrence refcounting keeps state
blobs alive for free. Version ids are content-addressed
(``s<step>-<8-hex digest prefix>``), which makes saving a deterministically
retrained state idempotent — the property task replay relies on.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from forge.errors import (
    DuplicateKey,
    InvalidArgument,
    ModelNotFound,
    NotFound,
    ShapeMismatch,
    VersionNotFound,
)
from forge.nn import layers as nnlayers
from forge.query import TagScalar
from forge.store import BlobPointer, Document, Store
from forge.store.types import validate_tags
from forge.tensorio import decode_tensors, encode_tensors

MODEL_PREFIX = "__sys/model/"
VERSION_PREFIX = "__sys/modelver/"
EVENT_PREFIX = "__sys/event/"

DEFAULT_CACHE_BYTES = 256 * 1024 * 1024
_METRIC_TAG = "m."


@dataclass(frozen=True)
class ModelRecord:
    model_key: str
    spec: dict
    created_at: int


@dataclass(frozen=True)
class ModelVersion:
    model_key: str
    version_id: str
    step: int
    state: BlobPointer
    metrics: dict[str, TagScalar]
    parent_version: str | None
    created_at: int


@dataclass(frozen=True)
class ModelEvent:
    model_key: str
    step: int
    name: str
    value: float
    at: int


class _TensorCache:
    """Bounded LRU over deserialized states, sized by tensor bytes."""

    def __init__(self, capacity_bytes: int):
        self.capacity = capacity_bytes
        self.entries: OrderedDict[tuple[str, str], dict[str, np.ndarray]] = OrderedDict()
        self.bytes = 0
        self.hits = 0
        self.misses = 0

    @staticmethod
    def _size(tensors: dict[str, np.ndarray]) -> int:
        return sum(t.nbytes for t in tensors.values())

    def get(self, key):
        entry = self.entries.get(key)
        if entry is None:
            self.misses += 1
            return None
        self.hits += 1
        self.entries.move_to_end(key)
        return {name: arr.copy() for name, arr in entry.items()}

    def put(self, key, tensors) -> None:
        size = self._size(tensors)
        if size > self.capacity:
            return
        if key in self.entries:
            return
        self.entries[key] = {name: arr.copy() for name, arr in tensors.items()}
        self.bytes += size
        while self.bytes > self.capacity and self.entries:
            _, evicted = self.entries.popitem(last=False)
            self.bytes -= self._size(evicted)


class ModelStore:
    def __init__(self, store: Store, cache_bytes: int = DEFAULT_CACHE_BYTES):
        self.store = store
        self.cache = _TensorCache(cache_bytes)
        self.blob_reads = 0
        self._event_seq: dict[str, int] = {}

    # -- registry ---------------------------------------------------------

    def register_model(self, model_key: str, spec: dict) -> ModelRecord:
        if not model_key or "/" in model_key:
            raise InvalidArgument("model keys must be non-empty and must not contain '/'")
        key = MODEL_PREFIX + model_key
        if self.store.exists(key):
            raise DuplicateKey(f"model {model_key!r} already exists")
        parsed = nnlayers.spec_from_dict(spec)
        nnlayers.validate_spec(parsed)
        created = self.store.clock.now_ms()
        doc = Document(key=key, payload=nnlayers.spec_to_json(parsed).encode(),
                       tags={"at": created})
        self.store.put_system(doc)
        return ModelRecord(model_key=model_key, spec=nnlayers.spec_to_dict(parsed),
                           created_at=created)

    def get_model(self, model_key: str) -> ModelRecord:
        try:
            doc = self.store.get(MODEL_PREFIX + model_key)
        except NotFound:
            raise ModelNotFound(f"model {model_key!r} not registered") from None
        return ModelRecord(model_key=model_key, spec=json.loads(doc.payload.decode()),
                           created_at=doc.tags["at"])

    def has_model(self, model_key: str) -> bool:
        return self.store.exists(MODEL_PREFIX + model_key)

    def list_models(self) -> list[str]:
        return [k[len(MODEL_PREFIX):] for k in self.store.keys_with_prefix(MODEL_PREFIX)]

    # -- versioned states ----------------------------------------------------

    def save_state(self, model_key: str, step: int, tensors: dict[str, np.ndarray],
                   metrics: dict[str, TagScalar] | None = None,
                   parent_version: str | None = None) -> ModelVersion:
        record = self.get_model(model_key)
        if step < 0:
            raise InvalidArgument("step must be >= 0")
        metrics = metrics or {}
        validate_tags(metrics)
        self._check_shapes(record, tensors)
        blob = encode_tensors(tensors)
        import hashlib

        version_id = f"s{step}-{hashlib.sha256(blob).hexdigest()[:8]}"
        key = f"{VERSION_PREFIX}{model_key}/{step:012d}/{version_id}"
        if self.store.exists(key):
            return self._version_from_doc(model_key, self.store.get(key))
        ptr = self.store.put_blob(blob)
        tags: dict[str, TagScalar] = {"step": step, "at": self.store.clock.now_ms()}
        if parent_version is not None:
            tags["parent"] = parent_version
        for name, value in metrics.items():
            tags[_METRIC_TAG + name] = value
        doc = Document(key=key, payload=ptr, label=version_id, tags=tags)
        self.store.put_system(doc)
        return self._version_from_doc(model_key, doc)

    def _check_shapes(self, record: ModelRecord, tensors) -> None:
        spec = nnlayers.spec_from_dict(record.spec)
        shapes = nnlayers.param_shapes(spec)
        expect = {}
        for key, want in shapes.items():
            expect[f"{key}.weight"] = want["weight"]
            expect[f"{key}.bias"] = want["bias"]
        if set(tensors) != set(expect):
            raise ShapeMismatch(
                f"tensor names {sorted(tensors)} do not match spec parameters "
                f"{sorted(expect)}")
        for name, arr in tensors.items():
            if tuple(arr.shape) != expect[name]:
                raise ShapeMismatch(
                    f"tensor {name!r}: shape {tuple(arr.shape)} != spec {expect[name]}")

    @staticmethod
    def _version_from_doc(model_key: str, doc: Document) -> ModelVersion:
        metrics = {name[len(_METRIC_TAG):]: value for name, value in doc.tags.items()
                   if name.startswith(_METRIC_TAG)}
        return ModelVersion(
            model_key=model_key,
            version_id=doc.label,
            step=doc.tags["step"],
            state=doc.payload,
            metrics=metrics,
            parent_version=doc.tags.get("parent"),
            created_at=doc.tags["at"],
        )

    def list_versions(self, model_key: str) -> list[ModelVersion]:
        self.get_model(model_key)
        prefix = f"{VERSION_PREFIX}{model_key}/"
        keys = self.store.keys_with_prefix(prefix)
        keys.sort(key=lambda k: self.store.get_meta(k)[0])  # insertion order
        versions = [self._version_from_doc(model_key, self.store.get(k)) for k in keys]
        versions.sort(key=lambda v: v.step)  # stable: step, then insertion
        return versions

    def load_state(self, model_key: str, selector: str = "latest") -> dict[str, np.ndarray]:
        version = self.get_version(model_key, selector)
        cached = self.cache.get((model_key, version.version_id))
        if cached is not None:
            return cached
        self.blob_reads += 1
        tensors = decode_tensors(self.store.get_blob(version.state))
        self.cache.put((model_key, version.version_id), tensors)
        return tensors

    def get_version(self, model_key: str, selector: str = "latest") -> ModelVersion:
        versions = self.list_versions(model_key)
        if selector == "latest":
            if not versions:
                raise VersionNotFound(f"model {model_key!r} has no saved versions")
            return versions[-1]
        for version in versions:
            if version.version_id == selector:
                return version
        raise VersionNotFound(f"model {model_key!r} has no version {selector!r}")

    def cache_stats(self) -> dict:
        return {"hits": self.cache.hits, "misses": self.cache.misses,
                "bytes": self.cache.bytes, "blob_reads": self.blob_reads}

    # -- events ------------------------------------------------------------

    def record_event(self, model_key: str, step: int, name: str, value: float) -> None:
        if not self.has_model(model_key):
            raise ModelNotFound(f"model {model_key!r} not registered")
        seq = self._next_event_seq(model_key)
        payload = {"step": int(step), "name": name, "value": float(value),
                   "at": self.store.clock.now_ms()}
        key = f"{EVENT_PREFIX}{model_key}/{seq:012d}"
        self.store.put_system(Document(key=key, payload=json.dumps(payload).encode()))

    def _next_event_seq(self, model_key: str) -> int:
        seq = self._event_seq.get(model_key)
        if seq is None:
            existing = self.store.keys_with_prefix(f"{EVENT_PREFIX}{model_key}/")
            seq = int(existing[-1].rsplit("/", 1)[1]) + 1 if existing else 0
        self._event_seq[model_key] = seq + 1
        return seq

    def query_events(self, model_key: str, name: str | None = None,
                     step_range: tuple[int, int] | None = None) -> list[ModelEvent]:
        """Events ordered by (step, at, insertion); step_range is [lo, hi)."""
        if not self.has_model(model_key):
            raise ModelNotFound(f"model {model_key!r} not registered")
        prefix = f"{EVENT_PREFIX}{model_key}/"
        out: list[tuple[tuple, ModelEvent]] = []
        for key in self.store.keys_with_prefix(prefix):
            meta = json.loads(self.store.get(key).payload.decode())
            if name is not None and meta["name"] != name:
                continue
            if step_range is not None and not (step_range[0] <= meta["step"] < step_range[1]):
                continue
            seq = int(key.rsplit("/", 1)[1])
            event = ModelEvent(model_key=model_key, step=meta["step"], name=meta["name"],
                               value=meta["value"], at=meta["at"])
            out.append(((meta["step"], meta["at"], seq), event))
        out.sort(key=lambda pair: pair[0])
        return [event for _, event in out]
