"""Transformers and the operator algebra used to compose them.

Every pipeline node is a :class:`Transformer`. Composition operators build
operator nodes::

    a >> b      Then           (b applied to the output of a)
    a % k       rank cutoff    (sugar for ``a >> RankCutoff(k)``)
    a + b       LinearCombine
    a * c       ScalarProduct
    a ** b      FeatureUnion
    a | b       SetUnion
    a & b       SetIntersect
    a ^ b       Concat

Nodes compare structurally (``==``) through :meth:`Transformer.key`, which is
what prefix detection relies on. Stateful wrappers (counters, caches) keep
identity semantics.
"""

from __future__ import annotations

import struct
from typing import Any, Mapping

from .frame import REAL, REAL_LIST, TEXT, Frame, assign_ranks


class PipelineError(ValueError):
    pass


def _value_key(value: Any) -> tuple:
    if isinstance(value, bool):
        return ("bool", value)
    if isinstance(value, float):
        return ("real", struct.pack("<d", value))
    if isinstance(value, int):
        return ("integer", value)
    if isinstance(value, str):
        return ("text", value)
    if isinstance(value, (list, tuple)):
        return ("list", tuple(_value_key(v) for v in value))
    if value is None:
        return ("none",)
    return ("object", id(value))


class Transformer:
    """Base class: maps one frame to another."""

    def transform(self, frame: Frame) -> Frame:
        raise NotImplementedError

    def __call__(self, frame: Frame) -> Frame:
        return self.transform(frame)

    def key(self) -> tuple:
        """Structural identity. Defaults to object identity."""
        return ("object", id(self))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Transformer):
            return NotImplemented
        return self is other or self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())

    def stages(self) -> list[Transformer]:
        """Top-level ``>>`` stages; any non-Then node is a single stage."""
        return [self]

    def index(self, rows: Any) -> Any:
        raise TypeError(f"{type(self).__name__} is not an indexer")

    def __repr__(self) -> str:
        from .dsl import to_text

        return to_text(self, registry=None)

    # operators ------------------------------------------------------------

    def __rshift__(self, other: Transformer) -> Transformer:
        _check(other)
        return Then(self, other)

    def __mod__(self, k: int) -> Transformer:
        if isinstance(self, Identity):
            return RankCutoff(k)
        return Then(self, RankCutoff(k))

    def __add__(self, other: Transformer) -> Transformer:
        _check(other)
        return LinearCombine(self, other)

    def __mul__(self, c: float) -> Transformer:
        return ScalarProduct(self, c)

    def __rmul__(self, c: float) -> Transformer:
        return ScalarProduct(self, c)

    def __pow__(self, other: Transformer) -> Transformer:
        _check(other)
        return FeatureUnion(self, other)

    def __or__(self, other: Transformer) -> Transformer:
        _check(other)
        return SetUnion(self, other)

    def __and__(self, other: Transformer) -> Transformer:
        _check(other)
        return SetIntersect(self, other)

    def __xor__(self, other: Transformer) -> Transformer:
        _check(other)
        return Concat(self, other)


def _check(obj: object) -> None:
    if not isinstance(obj, Transformer):
        raise TypeError(f"expected a Transformer, got {type(obj).__name__}")


class Leaf(Transformer):
    """A named transformer whose identity is ``(kind, params)``.

    Names in ``implicit`` were filled in by a registry default; they count
    for identity but are not rendered as text.
    """

    implicit: frozenset[str] = frozenset()

    def __init__(self, kind: str, params: Mapping[str, Any] | None = None):
        self.kind = kind
        self.params = dict(params or {})

    def key(self) -> tuple:
        params = tuple(sorted((n, _value_key(v)) for n, v in self.params.items()))
        return ("leaf", self.kind, params)

    def transform(self, frame: Frame) -> Frame:
        raise NotImplementedError(f"leaf {self.kind!r} has no implementation")


class Identity(Transformer):
    def transform(self, frame: Frame) -> Frame:
        return frame

    def key(self) -> tuple:
        return ("identity",)


class Then(Transformer):
    def __init__(self, *stages: Transformer):
        flat: list[Transformer] = []
        for s in stages:
            _check(s)
            flat.extend(s.stages())
        if len(flat) < 2:
            raise PipelineError("Then needs at least two stages")
        self._stages = tuple(flat)

    def stages(self) -> list[Transformer]:
        return list(self._stages)

    def key(self) -> tuple:
        return ("then", tuple(s.key() for s in self._stages))

    def transform(self, frame: Frame) -> Frame:
        for s in self._stages:
            frame = s.transform(frame)
        return frame

    def index(self, rows: Any) -> Any:
        *head, last = self._stages
        frame = rows if isinstance(rows, Frame) else Frame.from_records(rows)
        for s in head:
            frame = s.transform(frame)
        return last.index(frame)


def then(*stages: Transformer) -> Transformer:
    """Compose stages; a single stage is returned as is, none gives Identity."""
    if not stages:
        return Identity()
    if len(stages) == 1:
        return stages[0]
    return Then(*stages)


class RankCutoff(Transformer):
    """Per-query truncation to the ``k`` best-ranked rows."""

    def __init__(self, k: int):
        if isinstance(k, bool) or not isinstance(k, int):
            raise PipelineError(f"rank cutoff must be an integer, got {k!r}")
        if k < 1:
            raise PipelineError(f"rank cutoff must be positive, got {k}")
        self.k = k

    def key(self) -> tuple:
        return ("cutoff", self.k)

    def transform(self, frame: Frame) -> Frame:
        return eval_cutoff(frame, self.k)


class ScalarProduct(Transformer):
    def __init__(self, inner: Transformer, c: float):
        _check(inner)
        if isinstance(c, bool) or not isinstance(c, (int, float)):
            raise PipelineError(f"scalar must be a number, got {c!r}")
        self.inner = inner
        self.c = float(c)

    def key(self) -> tuple:
        return ("scale", self.inner.key(), struct.pack("<d", self.c))

    def transform(self, frame: Frame) -> Frame:
        return eval_scalar_product(self.inner.transform(frame), self.c)


class _Binary(Transformer):
    symbol = "?"
    tag = "binary"

    def __init__(self, left: Transformer, right: Transformer):
        _check(left)
        _check(right)
        self.left = left
        self.right = right

    def key(self) -> tuple:
        return (self.tag, self.left.key(), self.right.key())

    def transform(self, frame: Frame) -> Frame:
        return self.combine(self.left.transform(frame), self.right.transform(frame))

    def combine(self, a: Frame, b: Frame) -> Frame:
        raise NotImplementedError


class LinearCombine(_Binary):
    symbol, tag = "+", "plus"

    def combine(self, a: Frame, b: Frame) -> Frame:
        return eval_linear_combine(a, b)


class FeatureUnion(_Binary):
    symbol, tag = "**", "features"

    def combine(self, a: Frame, b: Frame) -> Frame:
        return eval_feature_union(a, b)


class SetUnion(_Binary):
    symbol, tag = "|", "union"

    def combine(self, a: Frame, b: Frame) -> Frame:
        return eval_set_op(a, b, "union")


class SetIntersect(_Binary):
    symbol, tag = "&", "intersect"

    def combine(self, a: Frame, b: Frame) -> Frame:
        return eval_set_op(a, b, "intersect")


class Concat(_Binary):
    symbol, tag = "^", "concat"

    def combine(self, a: Frame, b: Frame) -> Frame:
        return eval_concat(a, b)


# module-level API ------------------------------------------------------------


def apply(t: Transformer, frame: Frame) -> Frame:
    return t.transform(frame)


def flatten(t: Transformer) -> list[Transformer]:
    return t.stages()


def struct_eq(a: Transformer, b: Transformer) -> bool:
    return a.key() == b.key()


# evaluation rules ------------------------------------------------------------


def eval_cutoff(results: Frame, k: int) -> Frame:
    if k < 1:
        raise PipelineError(f"rank cutoff must be positive, got {k}")
    ranked = assign_ranks(results)
    ri = ranked.index("rank")
    return ranked.with_rows(row for row in ranked.rows if row[ri] < k)


def eval_scalar_product(results: Frame, c: float) -> Frame:
    results.require("qid", "docno", "score")
    scores = [s * c for s in results.column("score")]
    return assign_ranks(results.with_column("score", REAL, scores))


_RESULT_COLUMNS = {"docno", "score", "rank", "features"}


def _carried_columns(a: Frame, b: Frame) -> list[tuple[str, str]]:
    # columns (qid included) present on both sides with the same kind, in a's order
    return [
        (n, k)
        for n, k in a.columns
        if n not in _RESULT_COLUMNS and n in b and b.kind(n) == k
    ]


def _keyed(frame: Frame, carried: list[tuple[str, str]]) -> dict[tuple, tuple]:
    """(qid, docno) -> (carried values, score); first occurrence wins."""
    qi, di = frame.index("qid"), frame.index("docno")
    si = frame.index("score") if "score" in frame else None
    ci = [frame.index(n) for n, _ in carried]
    out: dict[tuple, tuple] = {}
    for row in frame.rows:
        key = (row[qi], row[di])
        if key not in out:
            out[key] = (tuple(row[i] for i in ci), row[si] if si is not None else 0.0)
    return out


def _outer_join(a: Frame, b: Frame):
    a.require("qid", "docno", "score")
    b.require("qid", "docno", "score")
    carried = _carried_columns(a, b)
    ka, kb = _keyed(a, carried), _keyed(b, carried)
    keys = list(ka) + [k for k in kb if k not in ka]
    return carried, ka, kb, keys


def _joined_row(carried, key, ka, kb, extra):
    values = (ka.get(key) or kb[key])[0]
    names = [n for n, _ in carried]
    row = dict(zip(names, values))
    row["qid"] = key[0]
    row["docno"] = key[1]
    row.update(extra)
    return row


def _schema(carried: list[tuple[str, str]], tail: list[tuple[str, str]]):
    cols = list(carried)
    if not any(n == "qid" for n, _ in cols):
        cols.insert(0, ("qid", TEXT))
    return cols + [("docno", TEXT)] + tail


def eval_linear_combine(a: Frame, b: Frame) -> Frame:
    carried, ka, kb, keys = _outer_join(a, b)
    columns = _schema(carried, [("score", REAL)])
    names = [n for n, _ in columns]
    rows = []
    for key in keys:
        if key in ka and key in kb:
            score = ka[key][1] + kb[key][1]
        else:
            score = (ka.get(key) or kb[key])[1]
        row = _joined_row(carried, key, ka, kb, {"score": score})
        rows.append(tuple(row[n] for n in names))
    return assign_ranks(Frame(tuple(columns), tuple(rows)))


def eval_feature_union(a: Frame, b: Frame) -> Frame:
    carried, ka, kb, keys = _outer_join(a, b)
    columns = _schema(carried, [("score", REAL), ("features", REAL_LIST)])
    names = [n for n, _ in columns]
    rows = []
    for key in keys:
        sa = ka[key][1] if key in ka else 0.0
        sb = kb[key][1] if key in kb else 0.0
        row = _joined_row(carried, key, ka, kb, {"score": sa, "features": (sa, sb)})
        rows.append(tuple(row[n] for n in names))
    return assign_ranks(Frame(tuple(columns), tuple(rows)))


def eval_set_op(a: Frame, b: Frame, op: str) -> Frame:
    if op not in ("union", "intersect"):
        raise PipelineError(f"unknown set operation {op!r}")
    a.require("qid", "docno")
    b.require("qid", "docno")
    docs_a = _docs_by_qid(a)
    docs_b = _docs_by_qid(b)
    qids = list(docs_a) + [q for q in docs_b if q not in docs_a]
    rows = []
    for qid in qids:
        sa, sb = docs_a.get(qid, set()), docs_b.get(qid, set())
        docs = sa | sb if op == "union" else sa & sb
        rows.extend((qid, d) for d in sorted(docs))
    return Frame((("qid", TEXT), ("docno", TEXT)), tuple(rows))


def _docs_by_qid(frame: Frame) -> dict[str, set[str]]:
    qi, di = frame.index("qid"), frame.index("docno")
    out: dict[str, set[str]] = {}
    for row in frame.rows:
        out.setdefault(row[qi], set()).add(row[di])
    return out


def eval_concat(a: Frame, b: Frame) -> Frame:
    a.require("qid", "docno", "score")
    b.require("qid", "docno", "score")
    columns = _schema(_carried_columns(a, b), [("score", REAL)])
    names = [n for n, _ in columns]
    di, si = names.index("docno"), names.index("score")
    ga, gb = _rows_by_qid(a, names), _rows_by_qid(b, names)
    rows = []
    for qid in list(ga) + [q for q in gb if q not in ga]:
        top = ga.get(qid, [])
        seen = {r[di] for r in top}
        tail = []
        for r in gb.get(qid, []):
            if r[di] not in seen:
                seen.add(r[di])
                tail.append(r)
        if top and tail:
            # every appended score ends up strictly below every score of a
            shift = min(r[si] for r in top) - max(r[si] for r in tail) - 1.0
            tail = [r[:si] + (r[si] + shift,) + r[si + 1 :] for r in tail]
        rows.extend(top + tail)
    return assign_ranks(Frame(tuple(columns), tuple(rows)))


def _rows_by_qid(frame: Frame, names: list[str]) -> dict[str, list[tuple]]:
    idx = [frame.index(n) for n in names]
    qi = frame.index("qid")
    out: dict[str, list[tuple]] = {}
    for row in frame.rows:
        out.setdefault(row[qi], []).append(tuple(row[i] for i in idx))
    return out


__all__ = [
    "Concat",
    "FeatureUnion",
    "Identity",
    "Leaf",
    "LinearCombine",
    "PipelineError",
    "RankCutoff",
    "ScalarProduct",
    "SetIntersect",
    "SetUnion",
    "Then",
    "Transformer",
    "apply",
    "eval_concat",
    "eval_cutoff",
    "eval_feature_union",
    "eval_linear_combine",
    "eval_scalar_product",
    "eval_set_op",
    "flatten",
    "struct_eq",
    "then",
]
