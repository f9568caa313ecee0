"""Independent reference implementations the tests check the engine against.

These deliberately share no code with the package: a straight-line predicate
evaluator, a brute-force document filter, and central finite differences.
Expected values in the test suite come from these, never from the code under
test.
"""

from __future__ import annotations

import numpy as np


def variant(v):
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, int):
        return "int"
    if isinstance(v, float):
        return "float"
    return "str"


class OracleTypeError(Exception):
    pass


def oracle_predicate(tags: dict, tag: str, op: str, value) -> bool:
    """Straightforward re-implementation of predicate semantics."""
    if tag not in tags:
        return False
    actual = tags[tag]
    ref = value[0] if op == "IN" else value
    if variant(actual) != variant(ref):
        raise OracleTypeError(tag)
    if op == "IN":
        return any(actual == candidate for candidate in value)
    if op == "=":
        return actual == ref
    if op == "!=":
        return actual != ref
    if op == "<":
        return actual < ref
    if op == "<=":
        return actual <= ref
    if op == ">":
        return actual > ref
    if op == ">=":
        return actual >= ref
    raise AssertionError(f"bad op {op}")


def oracle_evaluate(preds: list[tuple], tags: dict) -> bool:
    """Conjunction with the same eager type-check-all-predicates rule."""
    mismatch = False
    result = True
    for tag, op, value in preds:
        try:
            if not oracle_predicate(tags, tag, op, value):
                result = False
        except OracleTypeError:
            mismatch = True
    if mismatch:
        raise OracleTypeError()
    return result


def brute_force_filter(docs: dict[str, dict], preds: list[tuple]) -> list[str]:
    """Keys of matching docs in ascending key order; docs is key -> tag map."""
    out = []
    for key in sorted(docs):
        if oracle_evaluate(preds, docs[key]):
            out.append(key)
    return out


def finite_difference_grads(loss_of_params, params: dict[str, np.ndarray],
                            h: float = 1e-4) -> dict[str, np.ndarray]:
    """Central differences of a scalar function of named parameter arrays.

    ``loss_of_params(params) -> float`` must not mutate its argument.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_of_params(params)
            flat[i] = orig - h
            down = loss_of_params(params)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1e-6, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
