"""Store engine internals: durability, crash atomicity, indexes, blobs,
staging groups, snapshot pagination, compaction, and the writer lock."""

import os
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forge.clock import FakeClock
from forge.errors import (
    ChecksumMismatch,
    DuplicateKey,
    EmptyBlob,
    InvalidArgument,
    NotFound,
    PayloadTooLarge,
    ReservedKey,
    StoreLocked,
)
from forge.query import MATCH_ALL, Predicate, TagQuery, parse
from forge.store import CommitGroupOp, DeleteOp, Document, PutOp, ScanCursor, Store
from forge.store.log import iter_frames, list_segments

from oracles import brute_force_filter


def make_store(path, **kw):
    kw.setdefault("clock", FakeClock())
    kw.setdefault("fsync", False)
    return Store(path, **kw)


def doc(key, payload=b"x", label=None, **tags):
    return Document(key=key, payload=payload, label=label, tags=tags)


class TestBasics:
    def test_put_get_round_trip(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.put(doc("s1", b"abcd", split="train"))
            got = s.get("s1")
            assert got.payload == b"abcd"
            assert got.tags == {"split": "train"}

    def test_duplicate_key(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.put(doc("s1"))
            with pytest.raises(DuplicateKey):
                s.put(doc("s1"))

    def test_get_missing(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            with pytest.raises(NotFound):
                s.get("missing")

    def test_inline_threshold(self, tmp_path):
        with make_store(tmp_path / "s", create=True, inline_threshold=64) as s:
            s.put(doc("ok", b"x" * 64))
            with pytest.raises(PayloadTooLarge):
                s.put(doc("big", b"x" * 65))

    def test_reserved_prefix_rejected(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            with pytest.raises(ReservedKey):
                s.put(doc("__sys/evil"))

    def test_blob_backed_get_returns_pointer(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            ptr = s.put_blob(b"y" * 100_000, 8192, 1)
            s.put(Document(key="b1", payload=ptr))
            got = s.get("b1")
            assert got.payload == ptr  # the pointer, not the bytes

    def test_thousand_documents_scan_all(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            keys = sorted(f"d{i:04d}" for i in range(1000))
            for k in keys:
                s.put(doc(k))
            got, end = s.scan(MATCH_ALL)
            assert got == keys
            assert end is None

    def test_tag_count_limit(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            with pytest.raises(InvalidArgument):
                s.put(doc("k", **{f"t{i}": i for i in range(65)}))


class TestDurability:
    def test_reopen_preserves_documents(self, tmp_path):
        path = tmp_path / "s"
        with make_store(path, create=True) as s:
            s.put(doc("a", b"1", split="train"))
            s.put(doc("b", b"2", split="test"))
        with make_store(path) as s:
            assert s.get("a").payload == b"1"
            assert s.scan(MATCH_ALL)[0] == ["a", "b"]

    def test_reopen_preserves_indexes(self, tmp_path):
        path = tmp_path / "s"
        with make_store(path, create=True) as s:
            s.create_index("split")
            s.put(doc("a", split="train"))
        with make_store(path) as s:
            assert s.indexes() == ["split"]
            assert s.scan(parse('split = "train"'))[0] == ["a"]

    def test_torn_tail_write_rolls_back(self, tmp_path):
        """A write interrupted mid-frame leaves the store as before the write."""
        path = tmp_path / "s"
        with make_store(path, create=True) as s:
            s.put(doc("a"))
            s.put(doc("b"))
        segment = list_segments(path)[-1]
        intact = segment.read_bytes()
        frames = iter_frames(segment, tolerate_torn_tail=False)
        last_start = frames[-1][0]
        # cut at every byte boundary inside the final frame
        for cut in range(last_start + 1, len(intact)):
            segment.write_bytes(intact[:cut])
            with make_store(path) as s:
                assert s.scan(MATCH_ALL)[0] == ["a"], f"cut at {cut}"
            segment.write_bytes(intact)

    def test_batch_is_all_or_nothing_at_any_cut(self, tmp_path):
        path = tmp_path / "s"
        with make_store(path, create=True) as s:
            s.put(doc("base"))
            s.apply_ops([PutOp(doc("x1")), PutOp(doc("x2")), PutOp(doc("x3"))])
        segment = list_segments(path)[-1]
        intact = segment.read_bytes()
        frames = iter_frames(segment, tolerate_torn_tail=False)
        batch_start = frames[-1][0]
        for cut in range(batch_start, len(intact), 7):
            segment.write_bytes(intact[:cut])
            with make_store(path) as s:
                keys = s.scan(MATCH_ALL)[0]
                assert keys == ["base"], f"cut at {cut} leaked a partial batch"
            segment.write_bytes(intact)
        with make_store(path) as s:
            assert s.scan(MATCH_ALL)[0] == ["base", "x1", "x2", "x3"]

    def test_corrupt_middle_frame_detected(self, tmp_path):
        from forge.errors import CorruptStore

        path = tmp_path / "s"
        with make_store(path, create=True) as s:
            for i in range(5):
                s.put(doc(f"k{i}"))
        segment = list_segments(path)[-1]
        raw = bytearray(segment.read_bytes())
        frames = iter_frames(segment, tolerate_torn_tail=False)
        # flip one byte inside the second frame's body; the tail after it is
        # then unreachable, which recovery must refuse to silently drop for
        # a non-final segment
        raw[frames[1][0] + 9] ^= 0xFF
        segment.write_bytes(bytes(raw))
        (path / "segment-00099.log").write_bytes(b"")  # make damaged one non-final
        with pytest.raises(CorruptStore):
            make_store(path)

    def test_writer_lock_exclusive(self, tmp_path):
        path = tmp_path / "s"
        s1 = make_store(path, create=True)
        try:
            with pytest.raises(StoreLocked):
                make_store(path)
        finally:
            s1.close()
        s2 = make_store(path)  # released on close
        s2.close()


class TestIndexes:
    def test_index_on_empty_store(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.create_index("split")
            assert s.scan(parse('split = "train"'))[0] == []

    def test_index_built_over_existing_docs(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            expected = []
            for i in range(100):
                split = "train" if i < 60 else "test"
                s.put(doc(f"d{i:03d}", split=split))
                if split == "train":
                    expected.append(f"d{i:03d}")
            s.create_index("split")
            assert s.scan(parse('split = "train"'))[0] == expected

    def test_create_index_idempotent(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.put(doc("a", split="train"))
            s.create_index("split")
            before = s.scan(parse('split = "train"'))[0]
            s.create_index("split")
            assert s.scan(parse('split = "train"'))[0] == before
            assert s.indexes() == ["split"]

    def test_range_query_on_index(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.create_index("step")
            for i in range(100):
                s.put(doc(f"d{i:03d}", step=i))
            got = s.scan(parse("step >= 10 AND step < 20"))[0]
            assert got == [f"d{i:03d}" for i in range(10, 20)]

    @given(st.data())
    @settings(max_examples=60, deadline=None)
    def test_index_scan_equals_linear_scan(self, tmp_path_factory, data):
        """For random docs and random well-typed queries, the indexed path and
        the brute-force path agree exactly."""
        rng = random.Random(data.draw(st.integers(0, 2**32)))
        path = tmp_path_factory.mktemp("idx") / "s"
        tag_pool = ["color", "step", "ratio", "flag"]
        with make_store(path, create=True) as s:
            for name in rng.sample(tag_pool, k=2):
                s.create_index(name)
            docs = {}
            for i in range(rng.randrange(1, 120)):
                tags = {}
                if rng.random() < 0.9:
                    tags["color"] = rng.choice(["red", "green", "blue"])
                if rng.random() < 0.9:
                    tags["step"] = rng.randrange(20)
                if rng.random() < 0.5:
                    tags["ratio"] = rng.choice([0.25, 0.5, 0.75])
                if rng.random() < 0.5:
                    tags["flag"] = rng.random() < 0.5
                key = f"d{i:04d}"
                docs[key] = tags
                s.put(Document(key=key, payload=b"", tags=tags))
            preds, pred_objs = [], []
            for _ in range(rng.randrange(0, 3)):
                tag = rng.choice(tag_pool)
                op = rng.choice(["=", "!=", "<", "<=", ">", ">=", "IN"])
                value = {
                    "color": lambda: rng.choice(["red", "green", "blue"]),
                    "step": lambda: rng.randrange(20),
                    "ratio": lambda: rng.choice([0.25, 0.5, 0.75]),
                    "flag": lambda: rng.random() < 0.5,
                }[tag]
                if op == "IN":
                    vals = tuple({value() for _ in range(rng.randrange(1, 4))})
                    preds.append((tag, op, vals))
                    pred_objs.append(Predicate(tag, op, values=vals))
                else:
                    v = value()
                    preds.append((tag, op, v))
                    pred_objs.append(Predicate(tag, op, v))
            query = TagQuery(tuple(pred_objs))
            expected = brute_force_filter(docs, preds)
            assert s.scan(query, use_index=True)[0] == expected
            assert s.scan(query, use_index=False)[0] == expected


class TestPagination:
    def _fill(self, s, n=40):
        for i in range(n):
            s.put(doc(f"d{i:03d}", step=i))

    @pytest.mark.parametrize("limit", [1, 3, 7, 40, 100])
    def test_pages_concatenate_to_full_scan(self, tmp_path, limit):
        with make_store(tmp_path / "s", create=True) as s:
            self._fill(s)
            full = s.scan(MATCH_ALL)[0]
            collected, cursor = [], None
            while True:
                page, cursor = s.scan(MATCH_ALL, cursor, limit=limit)
                collected.extend(page)
                if cursor is None:
                    break
            assert collected == full

    def test_pages_read_at_first_snapshot(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            self._fill(s, 10)
            page, cursor = s.scan(MATCH_ALL, limit=4)
            s.put(doc("zzz-late"))
            rest = []
            while cursor is not None:
                page2, cursor = s.scan(MATCH_ALL, cursor, limit=4)
                rest.extend(page2)
            assert "zzz-late" not in page + rest
            assert page + rest == [f"d{i:03d}" for i in range(10)]

    def test_limit_must_be_positive(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            with pytest.raises(InvalidArgument):
                s.scan(MATCH_ALL, limit=0)


class TestStaging:
    def test_staged_docs_invisible_until_commit(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.apply_ops([PutOp(doc("t1/000001", out=True), group="t1")])
            assert s.scan(MATCH_ALL)[0] == []
            assert not s.exists("t1/000001")
            s.apply_ops([CommitGroupOp("t1")])
            assert s.scan(MATCH_ALL)[0] == ["t1/000001"]

    def test_commit_and_writes_are_atomic_together(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.apply_ops([PutOp(doc("t2/a"), group="t2"),
                         PutOp(doc("t2/b"), group="t2"),
                         CommitGroupOp("t2")])
            assert s.scan(MATCH_ALL)[0] == ["t2/a", "t2/b"]

    def test_replay_overwrites_uncommitted_stage(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.apply_ops([PutOp(doc("t/x", b"attempt1"), group="t")])
            s.apply_ops([PutOp(doc("t/x", b"attempt2"), group="t")])
            s.apply_ops([CommitGroupOp("t")])
            assert s.get("t/x").payload == b"attempt2"

    def test_committed_doc_not_overwritable(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.apply_ops([PutOp(doc("t/x"), group="t"), CommitGroupOp("t")])
            with pytest.raises(DuplicateKey):
                s.apply_ops([PutOp(doc("t/x"), group="t")])

    def test_staging_survives_restart(self, tmp_path):
        path = tmp_path / "s"
        with make_store(path, create=True) as s:
            s.apply_ops([PutOp(doc("t/y"), group="t")])
        with make_store(path) as s:
            assert not s.exists("t/y")
            s.apply_ops([CommitGroupOp("t")])
            assert s.exists("t/y")


class TestSystemDocs:
    def test_replace_and_delete(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.put_system(doc("__sys/x", b"1"))
            s.put_system(doc("__sys/x", b"2"), replace=True)
            assert s.get("__sys/x").payload == b"2"
            s.delete_system("__sys/x")
            assert not s.exists("__sys/x")

    def test_sys_keys_hidden_from_scan(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.put_system(doc("__sys/x"))
            s.put(doc("user"))
            assert s.scan(MATCH_ALL)[0] == ["user"]

    def test_keys_with_prefix(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.put_system(doc("__sys/a/1"))
            s.put_system(doc("__sys/a/2"))
            s.put_system(doc("__sys/b/1"))
            assert s.keys_with_prefix("__sys/a/") == ["__sys/a/1", "__sys/a/2"]


class TestBlobs:
    def test_chunk_count_examples(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            assert s.put_blob(b"x" * (1 << 20), 256 * 1024, 0).chunk_count == 4
            one = s.put_blob(b"z", 4096, 0)
            assert one.chunk_count == 1
            assert one.total_size == 1

    def test_round_trip_random_10mib(self, tmp_path):
        data = random.Random(7).randbytes(10 * (1 << 20))
        with make_store(tmp_path / "s", create=True) as s:
            for codec in (0, 1):
                ptr = s.put_blob(data, 1 << 20, codec)
                assert s.get_blob(ptr) == data

    def test_empty_blob_rejected(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            with pytest.raises(EmptyBlob):
                s.put_blob(b"", 4096, 0)

    def test_chunk_size_bounds(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            with pytest.raises(InvalidArgument):
                s.put_blob(b"x", 4095, 0)
            with pytest.raises(InvalidArgument):
                s.put_blob(b"x", 4 * 1024 * 1024 + 1, 0)

    def test_unknown_blob_id(self, tmp_path):
        from forge.store.types import BlobPointer

        with make_store(tmp_path / "s", create=True) as s:
            ghost = BlobPointer(blob_id="f" * 32, total_size=10, chunk_count=1,
                                chunk_size=4096, codec_id=0, checksum=bytes(32))
            with pytest.raises(NotFound):
                s.get_blob(ghost)

    @pytest.mark.parametrize("codec", [0, 1])
    def test_corrupted_chunk_raises_checksum_mismatch(self, tmp_path, codec):
        """Flipping any single stored byte must surface, never silently."""
        rng = random.Random(13)
        data = rng.randbytes(50_000)
        with make_store(tmp_path / "s", create=True) as s:
            ptr = s.put_blob(data, 8192, codec)
            chunk_path = s.blobs._chunk_path(ptr.blob_id, rng.randrange(ptr.chunk_count))
            raw = bytearray(chunk_path.read_bytes())
            raw[rng.randrange(len(raw))] ^= 0x01
            chunk_path.write_bytes(bytes(raw))
            with pytest.raises(ChecksumMismatch):
                s.get_blob(ptr)

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_random_blob_round_trip(self, tmp_path_factory, seed):
        rng = random.Random(seed)
        size = rng.randrange(1, 1 << rng.randrange(1, 24))
        chunk = rng.randrange(4096, 4 * 1024 * 1024)
        codec = rng.choice([0, 1])
        data = rng.randbytes(size)
        path = tmp_path_factory.mktemp("blob") / "s"
        with make_store(path, create=True) as s:
            ptr = s.put_blob(data, chunk, codec)
            assert ptr.total_size == size
            assert ptr.chunk_count == -(-size // chunk)
            assert s.get_blob(ptr) == data


class TestCompaction:
    def test_compaction_drops_dead_versions_and_preserves_live(self, tmp_path):
        path = tmp_path / "s"
        with make_store(path, create=True) as s:
            for i in range(20):
                s.put(doc(f"d{i:02d}", step=i))
            for i in range(50):
                s.put_system(doc("__sys/churn", payload=str(i).encode()), replace=(i > 0))
            before_segments = sum(p.stat().st_size for p in list_segments(path))
            s.compact()
            after_segments = sum(p.stat().st_size for p in list_segments(path))
            assert after_segments < before_segments
            assert s.scan(MATCH_ALL)[0] == [f"d{i:02d}" for i in range(20)]
            assert s.get("__sys/churn").payload == b"49"
        with make_store(path) as s:
            assert s.scan(MATCH_ALL)[0] == [f"d{i:02d}" for i in range(20)]

    def test_compaction_collects_orphan_blobs(self, tmp_path):
        path = tmp_path / "s"
        with make_store(path, create=True) as s:
            live = s.put_blob(b"live" * 5000, 4096, 1)
            s.put(Document(key="keeper", payload=live))
            s.put_blob(b"orphan" * 5000, 4096, 1)
            assert len(os.listdir(path / "blobs")) > live.chunk_count
            s.compact()
            assert len(os.listdir(path / "blobs")) == live.chunk_count
            assert s.get_blob(live) == b"live" * 5000

    def test_compaction_preserves_uncommitted_stage(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.apply_ops([PutOp(doc("t/out"), group="t")])
            s.compact()
            assert not s.exists("t/out")
            s.apply_ops([CommitGroupOp("t")])
            assert s.exists("t/out")

    def test_compaction_preserves_committed_visibility(self, tmp_path):
        path = tmp_path / "s"
        with make_store(path, create=True) as s:
            s.apply_ops([PutOp(doc("t/out"), group="t"), CommitGroupOp("t")])
            s.compact()
            assert s.exists("t/out")
        with make_store(path) as s:
            assert s.exists("t/out")

    def test_delete_then_compact_removes_key(self, tmp_path):
        with make_store(tmp_path / "s", create=True) as s:
            s.put_system(doc("__sys/tmp"))
            s.delete_system("__sys/tmp")
            s.compact()
            assert not s.exists("__sys/tmp")
            assert "__sys/tmp" not in s._entries
