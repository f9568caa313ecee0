"""Binary codecs: documents, tag values, log record bodies, tensor container."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forge.errors import InvalidArgument
from forge.store import records
from forge.store.types import BlobPointer, Document
from forge.tensorio import decode_tensors, encode_tensors

_tag_values = st.one_of(
    st.integers(min_value=-(2**63), max_value=2**63 - 1),
    st.floats(allow_nan=False, allow_infinity=False, width=64),
    st.booleans(),
    st.text(max_size=16),
)

_tag_names = st.text(
    alphabet=st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=10)

_documents = st.builds(
    Document,
    key=st.text(min_size=1, max_size=20).filter(lambda k: not k.startswith("__sys/")),
    payload=st.binary(max_size=256),
    label=st.one_of(st.none(), st.text(max_size=16)),
    tags=st.dictionaries(_tag_names, _tag_values, max_size=6),
)


@given(_documents)
@settings(max_examples=500, deadline=None)
def test_document_round_trip(doc):
    assert records.decode_document(records.encode_document(doc)) == doc


def test_pointer_document_round_trip():
    ptr = BlobPointer(blob_id="ab" * 16, total_size=1000, chunk_count=4,
                      chunk_size=256, codec_id=1, checksum=bytes(range(32)))
    doc = Document(key="k", payload=ptr, label="L", tags={"a": 1})
    assert records.decode_document(records.encode_document(doc)) == doc


def test_pointer_chunk_count_invariant():
    with pytest.raises(InvalidArgument):
        BlobPointer(blob_id="x", total_size=1000, chunk_count=3, chunk_size=256,
                    codec_id=0, checksum=bytes(32))


@given(_documents, st.integers(min_value=0, max_value=2**40),
       st.sampled_from([records.OP_PUT, records.OP_REPLACE]))
@settings(max_examples=200, deadline=None)
def test_doc_op_round_trip(doc, seq, op):
    body = records.encode_doc_op(op, seq, 12345, "grp", doc)
    [decoded] = records.decode_body(body)
    assert decoded.op == op
    assert decoded.seq == seq
    assert decoded.arrived_ms == 12345
    assert decoded.group == "grp"
    assert decoded.doc == doc


def test_batch_round_trip():
    doc = Document(key="k", payload=b"x", tags={})
    bodies = [
        records.encode_doc_op(records.OP_PUT, 1, 0, None, doc),
        records.encode_delete(2, "k"),
        records.encode_commit_group(3, "g"),
    ]
    ops = records.decode_body(records.encode_batch(bodies))
    assert [o.op for o in ops] == [records.OP_PUT, records.OP_DELETE,
                                   records.OP_COMMIT_GROUP]
    assert ops[1].key == "k"
    assert ops[2].group == "g"


# --- tensor container ----------------------------------------------------------

@st.composite
def _named_tensors(draw):
    n = draw(st.integers(min_value=0, max_value=4))
    out = {}
    for i in range(n):
        rank = draw(st.integers(min_value=0, max_value=3))
        dims = tuple(draw(st.integers(min_value=1, max_value=5)) for _ in range(rank))
        seed = draw(st.integers(min_value=0, max_value=2**31))
        arr = np.random.default_rng(seed).normal(size=dims).astype(np.float32)
        out[f"t{i}"] = arr
    return out


@given(_named_tensors())
@settings(max_examples=300, deadline=None)
def test_tensor_container_bitexact_round_trip(tensors):
    decoded = decode_tensors(encode_tensors(tensors))
    assert set(decoded) == set(tensors)
    for name in tensors:
        assert decoded[name].dtype == np.float32
        assert decoded[name].shape == tensors[name].shape
        assert decoded[name].tobytes() == tensors[name].tobytes()


def test_tensor_container_is_deterministic():
    tensors = {"b": np.ones((2, 3), np.float32), "a": np.zeros(4, np.float32)}
    assert encode_tensors(tensors) == encode_tensors(dict(reversed(tensors.items())))


def test_tensor_container_layout():
    buf = encode_tensors({"w": np.array([[1.0, 2.0]], np.float32)})
    assert buf[:4] == b"FGTS"
    assert buf[4] == 1  # format version
    assert int.from_bytes(buf[5:9], "little") == 1  # tensor count
    assert int.from_bytes(buf[9:11], "little") == 1  # name length
    assert buf[11:12] == b"w"
    assert buf[12] == 0  # dtype f32
    assert buf[13] == 2  # rank
    dims = [int.from_bytes(buf[14 + 4 * i:18 + 4 * i], "little") for i in range(2)]
    assert dims == [1, 2]
    assert buf[22:] == np.array([1.0, 2.0], "<f4").tobytes()


def test_tensor_container_rejects_f64():
    with pytest.raises(InvalidArgument):
        encode_tensors({"x": np.zeros(2, np.float64)})
