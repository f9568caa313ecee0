"""Query language: parsing, evaluation vs an independent oracle, rendering."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forge.errors import MixedVariantSet, QuerySyntaxError, TypeMismatch
from forge.query import MATCH_ALL, Predicate, TagQuery, evaluate, parse, render

from oracles import OracleTypeError, oracle_evaluate


def q(*preds):
    return TagQuery(tuple(preds))


class TestParse:
    def test_empty_is_match_all(self):
        assert parse("") == MATCH_ALL
        assert parse("   ") == MATCH_ALL
        assert parse("").is_match_all

    def test_two_predicate_conjunction(self):
        got = parse('split = "train" AND step >= 10')
        assert got == q(Predicate("split", "=", "train"), Predicate("step", ">=", 10))

    def test_in_set_of_ints(self):
        got = parse("epoch IN {1, 2, 3}")
        assert got == q(Predicate("epoch", "IN", values=(1, 2, 3)))

    def test_in_set_canonical_order_and_dedup(self):
        assert parse("e IN {3, 1, 3, 2}") == q(Predicate("e", "IN", values=(1, 2, 3)))

    @pytest.mark.parametrize("src,value", [
        ('x = "a\\"b"', 'a"b'),
        ('x = "line\\nbreak"', "line\nbreak"),
        ('x = "\\u0041"', "A"),
        ("x = -5", -5),
        ("x = 3.5", 3.5),
        ("x = 1.5e3", 1500.0),
        ("x = true", True),
        ("x = false", False),
    ])
    def test_literals(self, src, value):
        assert parse(src) == q(Predicate("x", "=", value))

    @pytest.mark.parametrize("op", ["=", "!=", "<", "<=", ">", ">="])
    def test_operators(self, op):
        assert parse(f"n {op} 4") == q(Predicate("n", op, 4))

    @pytest.mark.parametrize("src", [
        "split =",            # missing literal
        "= 3",                # missing ident
        "a = 3 AND",          # dangling AND
        'a = "unterminated',  # bad string
        "a IN {}",            # empty set
        "a in {1}",           # lowercase keyword is an ident, then junk
        "a = 1 b = 2",        # missing AND
        "a ! 3",              # bad operator
        "a = 1e5",            # float must contain '.'
        "a = 1.",             # digits required after dot
    ])
    def test_syntax_errors(self, src):
        with pytest.raises(QuerySyntaxError):
            parse(src)

    def test_error_carries_byte_offset_and_expected(self):
        with pytest.raises(QuerySyntaxError) as info:
            parse('split = ')
        assert info.value.offset == 8
        assert info.value.expected

    def test_offset_is_bytes_not_chars(self):
        # two-byte UTF-8 char before the error position
        with pytest.raises(QuerySyntaxError) as info:
            parse('x = "é" AND !')
        assert info.value.offset == len('x = "é" AND '.encode("utf-8"))

    def test_mixed_variant_in_set(self):
        with pytest.raises(MixedVariantSet):
            parse("a IN {1, 2.0}")

    def test_int_float_are_distinct_variants(self):
        assert parse("a = 1") != parse("a = 1.0")

    def test_integer_out_of_i64_range(self):
        with pytest.raises(QuerySyntaxError):
            parse(f"a = {2**63}")


class TestEvaluate:
    def test_match_all_accepts_anything(self):
        assert evaluate(MATCH_ALL, {}) is True
        assert evaluate(MATCH_ALL, {"x": 1}) is True

    def test_simple_mismatch(self):
        assert evaluate(parse('split = "train"'), {"split": "test"}) is False

    def test_absent_tag_is_false_not_error(self):
        assert evaluate(parse("missing = 1"), {"other": 1}) is False

    def test_cross_variant_raises(self):
        with pytest.raises(TypeMismatch):
            evaluate(parse("x = 1"), {"x": "one"})

    def test_int_vs_float_raises(self):
        with pytest.raises(TypeMismatch):
            evaluate(parse("x = 1"), {"x": 1.0})

    def test_bool_vs_int_raises(self):
        with pytest.raises(TypeMismatch):
            evaluate(parse("x = true"), {"x": 1})

    def test_mismatch_checked_even_when_earlier_predicate_fails(self):
        # first predicate is already false; the mismatch on the second must
        # still surface (eager checking across all predicates)
        query = parse('a = 1 AND b = "s"')
        with pytest.raises(TypeMismatch):
            evaluate(query, {"a": 2, "b": 3})

    def test_in_membership(self):
        query = parse("e IN {1, 2, 3}")
        assert evaluate(query, {"e": 2}) is True
        assert evaluate(query, {"e": 4}) is False

    def test_string_ordering(self):
        assert evaluate(parse('s < "b"'), {"s": "a"}) is True
        assert evaluate(parse('s < "a"'), {"s": "b"}) is False


# --- randomized agreement with the independent oracle -------------------------

_tag_names = st.sampled_from(["alpha", "beta", "gamma", "delta", "epsilon"])
_scalars = st.one_of(
    st.integers(min_value=-(2**31), max_value=2**31),
    st.floats(allow_nan=False, allow_infinity=False, width=64),
    st.booleans(),
    st.text(max_size=8),
)


def _values_single_variant(draw):
    kind = draw(st.sampled_from(["int", "float", "bool", "str"]))
    strat = {
        "int": st.integers(min_value=-100, max_value=100),
        "float": st.floats(allow_nan=False, allow_infinity=False, width=32),
        "bool": st.booleans(),
        "str": st.text(max_size=5),
    }[kind]
    return draw(st.lists(strat, min_size=1, max_size=4, unique_by=repr))


@st.composite
def _predicates(draw):
    tag = draw(_tag_names)
    op = draw(st.sampled_from(["=", "!=", "<", "<=", ">", ">=", "IN"]))
    if op == "IN":
        return Predicate(tag, "IN", values=tuple(_values_single_variant(draw)))
    return Predicate(tag, op, draw(_scalars))


@st.composite
def _queries(draw):
    return TagQuery(tuple(draw(st.lists(_predicates(), max_size=4))))


@st.composite
def _tag_maps(draw):
    return draw(st.dictionaries(_tag_names, _scalars, max_size=5))


@given(_queries(), _tag_maps())
@settings(max_examples=400, deadline=None)
def test_evaluate_agrees_with_oracle(query, tags):
    preds = [(p.tag, p.op, p.values if p.op == "IN" else p.value)
             for p in query.predicates]
    try:
        expected = oracle_evaluate(preds, tags)
    except OracleTypeError:
        with pytest.raises(TypeMismatch):
            evaluate(query, tags)
        return
    assert evaluate(query, tags) == expected


@given(_queries())
@settings(max_examples=1000, deadline=None)
def test_parse_render_round_trip(query):
    assert parse(render(query)) == query


@given(st.text(max_size=12))
@settings(max_examples=500, deadline=None)
def test_string_predicate_escaping_round_trips(value):
    query = q(Predicate("s", "=", value))
    assert parse(render(query)) == query


@given(_queries(), _predicates(), _tag_maps())
@settings(max_examples=300, deadline=None)
def test_adding_predicate_never_grows_match(query, extra, tags):
    bigger = TagQuery(query.predicates + (extra,))
    try:
        base = evaluate(query, tags)
        more = evaluate(bigger, tags)
    except TypeMismatch:
        return
    if more:
        assert base


def test_render_match_all_is_empty():
    assert render(MATCH_ALL) == ""


def test_render_float_always_has_dot():
    for v in [1.0, 1e-7, 2.5e20, -0.0, 3.25]:
        text = render(q(Predicate("f", "=", v)))
        literal = text.split(" = ")[1]
        assert "." in literal
        assert parse(text) == q(Predicate("f", "=", v))
