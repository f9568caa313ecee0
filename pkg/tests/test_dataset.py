"""Views, batch cursors, and stream-controller semantics."""

import random

import pytest

from forge.clock import FakeClock
from forge.engine import Forge
from forge.errors import AlreadyAttached, DuplicateKey, ViewNotFound
from forge.store import Document


def doc(key, payload=b"x", label=None, **tags):
    return Document(key=key, payload=payload, label=label, tags=tags)


def fill(api, n, start=0, **tags):
    tags = tags or {"split": "train"}
    for i in range(start, start + n):
        api.put_document(doc(f"d{i:04d}", **tags))


class TestViews:
    def test_define_over_empty_store(self, api):
        view = api.define_view("v", 'split = "train"')
        assert view.view_key == "v"
        assert api.view_slice("v") == []

    def test_view_matches_split(self, api):
        for i in range(100):
            api.put_document(doc(f"d{i:03d}", split="train" if i < 60 else "test"))
        api.define_view("train", 'split = "train"')
        assert len(api.view_slice("train")) == 60

    def test_duplicate_view_key(self, api):
        api.define_view("v", "")
        with pytest.raises(DuplicateKey):
            api.define_view("v", "")

    def test_view_is_lazy_metadata_only(self, engine):
        fill(engine, 50)
        seq_before = engine.store.snapshot_seq()
        for i in range(10):
            engine.define_view(f"view{i}", 'split = "train"')
        # each definition writes exactly one system document, independent of
        # the document count
        assert engine.store.snapshot_seq() - seq_before == 10
        assert len(engine.view_slice("view0")) == 50

    def test_unknown_view(self, api):
        with pytest.raises(ViewNotFound):
            api.view_slice("ghost")
        with pytest.raises(ViewNotFound):
            api.open_cursor("ghost", 4)


class TestBatchCursor:
    def test_batches_partition_in_order(self, api):
        fill(api, 10)
        api.define_view("v", 'split = "train"')
        cursor = api.open_cursor("v", batch_size=4)
        sizes, all_keys = [], []
        while True:
            docs, cursor, end = api.read_batch(cursor)
            sizes.append(len(docs))
            all_keys.extend(d.key for d in docs)
            if end:
                break
        assert sizes == [4, 4, 2]
        assert all_keys == [f"d{i:04d}" for i in range(10)]

    def test_cursor_survives_restart_without_duplicates(self, tmp_path):
        """Consume 4 of 10, crash, reopen: the next batch starts at item 5."""
        clock = FakeClock()
        path = tmp_path / "s"
        eng = Forge(path, create=True, clock=clock, fsync=False)
        fill(eng, 10)
        eng.define_view("v", 'split = "train"')
        cursor = eng.open_cursor("v", batch_size=4, cursor_id="trainer")
        docs, cursor, _ = eng.read_batch(cursor)
        assert [d.key for d in docs] == [f"d{i:04d}" for i in range(4)]
        eng.close()  # simulated crash: all in-memory state gone

        eng = Forge(path, clock=clock, fsync=False)
        cursor = eng.open_cursor("v", batch_size=4, cursor_id="trainer")
        docs, cursor, _ = eng.read_batch(cursor)
        assert [d.key for d in docs] == [f"d{i:04d}" for i in range(4, 8)]
        eng.close()

    def test_blob_payloads_resolved_transparently(self, api):
        data = random.Random(5).randbytes(60_000)
        ptr = api.put_blob(data)
        api.put_document(Document(key="big", payload=ptr, tags={"split": "train"}))
        api.define_view("v", 'split = "train"')
        cursor = api.open_cursor("v", batch_size=2)
        docs, _, end = api.read_batch(cursor)
        assert end
        assert docs[0].payload == data  # bytes, not the pointer

    def test_late_documents_appear_in_later_batches(self, api):
        fill(api, 4)
        api.define_view("v", 'split = "train"')
        cursor = api.open_cursor("v", batch_size=4)
        _, cursor, end = api.read_batch(cursor)
        assert end
        fill(api, 2, start=4)
        docs, cursor, end = api.read_batch(cursor)
        assert [d.key for d in docs] == ["d0004", "d0005"]


class TestStreamController:
    def _setup(self, api, threshold=32, max_age=5000):
        api.define_view("v", 'split = "train"')
        api.register_model("m", {"input_dims": [1], "layers": [
            {"name": "o", "kind": "dense", "out_units": 1}]})
        api.attach_stream("v", threshold, max_age, "m", "out")

    def test_below_threshold_no_trigger(self, api):
        self._setup(api)
        fill(api, 31)
        assert api.poll_stream("v", "p") is None

    def test_threshold_crossing_emits_one_task_covering_all(self, api):
        self._setup(api)
        fill(api, 31)
        api.poll_stream("v", "p")
        fill(api, 1, start=31)
        task = api.poll_stream("v", "p")
        assert task is not None
        assert task.params["from_key"] == ""
        assert task.params["upto_key"] == "d0031"
        # trigger drains all pending; nothing left
        assert api.poll_stream("v", "p") is None

    def test_overshoot_drains_everything(self, api):
        self._setup(api)
        fill(api, 70)
        task = api.poll_stream("v", "p")
        assert task.params["upto_key"] == "d0069"
        assert api.poll_stream("v", "p") is None

    def test_age_trigger_with_injected_clock(self, engine, clock):
        self._setup(engine, threshold=32, max_age=5000)
        fill(engine, 5)
        assert engine.poll_stream("v", "p") is None
        clock.advance(4999)
        assert engine.poll_stream("v", "p") is None
        clock.advance(2)
        task = engine.poll_stream("v", "p")
        assert task is not None
        assert task.params["upto_key"] == "d0004"

    def test_attach_validations(self, api):
        api.define_view("v", "")
        api.register_model("m", {"input_dims": [1], "layers": [
            {"name": "o", "kind": "dense", "out_units": 1}]})
        with pytest.raises(ViewNotFound):
            api.attach_stream("ghost", 1, 100, "m", "out")
        api.attach_stream("v", 1, 100, "m", "out")
        with pytest.raises(AlreadyAttached):
            api.attach_stream("v", 1, 100, "m", "out")

    def test_controller_lease_excludes_second_poller(self, engine, clock):
        self._setup(engine, threshold=1)
        fill(engine, 1)
        assert engine.poll_stream("v", "p1") is not None
        fill(engine, 1, start=1)
        # p2 cannot poll while p1's controller lease is live
        assert engine.poll_stream("v", "p2") is None
        assert engine.poll_stream("v", "p1") is not None
        clock.advance(31_000)
        fill(engine, 1, start=2)
        assert engine.poll_stream("v", "p2") is not None

    def test_crash_between_trigger_and_dispatch_is_exactly_once(self, tmp_path):
        """The watermark advance and the task enqueue are one atomic batch, so
        a crash leaves either both or neither; replays re-derive the same id."""
        clock = FakeClock()
        path = tmp_path / "s"
        eng = Forge(path, create=True, clock=clock, fsync=False)
        self._setup(eng, threshold=5)
        fill(eng, 7)
        task = eng.poll_stream("v", "p")
        assert task is not None
        eng.close()  # crash after dispatch

        eng = Forge(path, clock=clock, fsync=False)
        assert eng.poll_stream("v", "p") is None  # nothing re-emitted
        ids = {t.task_id for t in eng.list_tasks()}
        assert ids == {task.task_id}
        eng.close()


class TestExactlyOnceRandomized:
    @pytest.mark.parametrize("seed", range(8))
    def test_random_interleavings_partition_documents(self, tmp_path, seed):
        """Appends, polls, and crash-reopens in random order: every matching
        document lands in exactly one emitted task range."""
        rng = random.Random(seed)
        clock = FakeClock()
        path = tmp_path / "s"
        eng = Forge(path, create=True, clock=clock, fsync=False)
        eng.define_view("v", 'kind = "s"')
        eng.register_model("m", {"input_dims": [1], "layers": [
            {"name": "o", "kind": "dense", "out_units": 1}]})
        eng.attach_stream("v", rng.choice([2, 3, 5]), 500, "m", "out")
        appended = 0
        for _ in range(rng.randrange(10, 30)):
            action = rng.random()
            if action < 0.5:
                eng.put_document(doc(f"k{appended:04d}", kind="s"))
                appended += 1
            elif action < 0.8:
                eng.poll_stream("v", "p")
                clock.advance(rng.randrange(0, 300))
            else:
                eng.close()
                eng = Forge(path, clock=clock, fsync=False)
                clock.advance(31_000)  # let the controller lease lapse
        # drain
        for _ in range(20):
            clock.advance(1000)
            eng.poll_stream("v", "p")
        ranges = [(t.params["from_key"], t.params["upto_key"])
                  for t in eng.list_tasks()]
        covered = {}
        for i in range(appended):
            key = f"k{i:04d}"
            owners = [r for r in ranges if r[0] < key <= r[1]]
            covered[key] = len(owners)
        assert all(n == 1 for n in covered.values()), covered
        eng.close()
