"""Relational frames: the tables that flow between pipeline stages.

A :class:`Frame` is an immutable, ordered table with named and typed
columns. Queries, documents, results and relevance assessments are all
frames that carry a known set of required columns (see :class:`RelationKind`).
"""

from __future__ import annotations

import enum
import io
from array import array
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

TEXT = "text"
REAL = "real"
INTEGER = "integer"
REAL_LIST = "real-list"

KINDS = (TEXT, REAL, INTEGER, REAL_LIST)

_INT64_MIN = -(2**63)
_INT64_MAX = 2**63 - 1


class FrameError(ValueError):
    """Raised for malformed frames or unmet column preconditions."""


class RelationKind(enum.Enum):
    Q = "Q"
    D = "D"
    R = "R"
    RA = "RA"

    @property
    def required(self) -> dict[str, str]:
        return _REQUIRED[self]


_REQUIRED: dict[RelationKind, dict[str, str]] = {
    RelationKind.Q: {"qid": TEXT, "query": TEXT},
    RelationKind.D: {"docno": TEXT},
    RelationKind.R: {"qid": TEXT, "docno": TEXT, "score": REAL, "rank": INTEGER},
    RelationKind.RA: {"qid": TEXT, "docno": TEXT, "label": INTEGER},
}


def kind_of(value: Any) -> str:
    """Infer the column kind of a single Python value."""
    if isinstance(value, bool):
        raise FrameError("boolean values are not a supported column kind")
    if isinstance(value, str):
        return TEXT
    if isinstance(value, int):
        return INTEGER
    if isinstance(value, float):
        return REAL
    if isinstance(value, (list, tuple)):
        return REAL_LIST
    raise FrameError(f"unsupported value type {type(value).__name__}")


def coerce(value: Any, kind: str) -> Any:
    """Normalise ``value`` to the canonical Python representation of ``kind``."""
    if kind == TEXT:
        if not isinstance(value, str):
            raise FrameError(f"expected text, got {value!r}")
        return value
    if kind == REAL:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise FrameError(f"expected real, got {value!r}")
        return float(value)
    if kind == INTEGER:
        if isinstance(value, bool) or not isinstance(value, int):
            raise FrameError(f"expected integer, got {value!r}")
        if not _INT64_MIN <= value <= _INT64_MAX:
            raise FrameError(f"integer {value} outside the signed 64-bit range")
        return value
    if kind == REAL_LIST:
        if not isinstance(value, (list, tuple)):
            raise FrameError(f"expected real-list, got {value!r}")
        return tuple(coerce(v, REAL) for v in value)
    raise FrameError(f"unknown column kind {kind!r}")


@dataclass(frozen=True, eq=False)
class Frame:
    columns: tuple[tuple[str, str], ...]
    rows: tuple[tuple, ...] = ()

    def __post_init__(self) -> None:
        names = [name for name, _ in self.columns]
        if len(set(names)) != len(names):
            raise FrameError(f"duplicate column names in {names}")
        for name, kind in self.columns:
            if kind not in KINDS:
                raise FrameError(f"column {name!r} has unknown kind {kind!r}")
        width = len(self.columns)
        for row in self.rows:
            if len(row) != width:
                raise FrameError(f"row {row!r} does not match {width} columns")

    # construction ---------------------------------------------------------

    @classmethod
    def empty(cls, columns: Sequence[tuple[str, str]]) -> Frame:
        return cls(tuple((n, k) for n, k in columns), ())

    @classmethod
    def from_rows(
        cls, columns: Sequence[tuple[str, str]], rows: Iterable[Sequence[Any]]
    ) -> Frame:
        """Build a frame, coercing every value to its column's kind."""
        columns = tuple((n, k) for n, k in columns)
        kinds = [k for _, k in columns]
        out = []
        for row in rows:
            if len(row) != len(kinds):
                raise FrameError(f"row {row!r} does not match {len(kinds)} columns")
            out.append(tuple(coerce(v, k) for v, k in zip(row, kinds)))
        return cls(columns, tuple(out))

    @classmethod
    def from_records(
        cls,
        records: Iterable[Mapping[str, Any]],
        columns: Sequence[tuple[str, str]] | None = None,
    ) -> Frame:
        """Build a frame from dict rows; kinds are inferred from the first row."""
        records = list(records)
        if columns is None:
            if not records:
                raise FrameError("cannot infer columns from zero records")
            columns = [(name, kind_of(v)) for name, v in records[0].items()]
        names = [n for n, _ in columns]
        try:
            rows = [[rec[n] for n in names] for rec in records]
        except KeyError as e:
            raise FrameError(f"record is missing column {e.args[0]!r}") from None
        return cls.from_rows(columns, rows)

    # access ---------------------------------------------------------------

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.columns]

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, name: object) -> bool:
        return any(n == name for n, _ in self.columns)

    def index(self, name: str) -> int:
        for i, (n, _) in enumerate(self.columns):
            if n == name:
                return i
        raise FrameError(f"no column {name!r} (have {self.names})")

    def kind(self, name: str) -> str:
        return self.columns[self.index(name)][1]

    def column(self, name: str) -> list:
        i = self.index(name)
        return [row[i] for row in self.rows]

    def records(self) -> list[dict[str, Any]]:
        names = self.names
        return [dict(zip(names, row)) for row in self.rows]

    def require(self, *names: str) -> None:
        missing = [n for n in names if n not in self]
        if missing:
            raise FrameError(f"missing required column(s) {missing} (have {self.names})")

    # derivation -----------------------------------------------------------

    def take(self, indices: Iterable[int]) -> Frame:
        rows = self.rows
        return Frame(self.columns, tuple(rows[i] for i in indices))

    def with_rows(self, rows: Iterable[tuple]) -> Frame:
        return Frame(self.columns, tuple(rows))

    def select(self, names: Sequence[str]) -> Frame:
        idx = [self.index(n) for n in names]
        return Frame(
            tuple(self.columns[i] for i in idx),
            tuple(tuple(row[i] for i in idx) for row in self.rows),
        )

    def drop(self, names: str | Iterable[str]) -> Frame:
        gone = {names} if isinstance(names, str) else set(names)
        return self.select([n for n in self.names if n not in gone])

    def with_column(self, name: str, kind: str, values: Sequence[Any]) -> Frame:
        """Replace ``name`` in place if present, else append it."""
        if len(values) != len(self.rows):
            raise FrameError(f"{len(values)} values for {len(self.rows)} rows")
        if name in self:
            i = self.index(name)
            columns = self.columns[:i] + ((name, kind),) + self.columns[i + 1 :]
            rows = tuple(
                row[:i] + (v,) + row[i + 1 :] for row, v in zip(self.rows, values)
            )
        else:
            columns = self.columns + ((name, kind),)
            rows = tuple(row + (v,) for row, v in zip(self.rows, values))
        return Frame(columns, rows)

    def group_indices(self, by: str = "qid") -> dict[Any, list[int]]:
        """Row indices per value of ``by``, keyed in order of first appearance."""
        i = self.index(by)
        groups: dict[Any, list[int]] = {}
        for r, row in enumerate(self.rows):
            groups.setdefault(row[i], []).append(r)
        return groups

    # equality -------------------------------------------------------------

    def __eq__(self, other: object) -> bool:
        # bit-exact: reals compare by IEEE-754 bits, so -0.0 != 0.0 and NaN == NaN
        if not isinstance(other, Frame):
            return NotImplemented
        if self.columns != other.columns or len(self.rows) != len(other.rows):
            return False
        for i, (_, kind) in enumerate(self.columns):
            a = [row[i] for row in self.rows]
            b = [row[i] for row in other.rows]
            if kind == REAL:
                if array("d", a).tobytes() != array("d", b).tobytes():
                    return False
            elif kind == REAL_LIST:
                if [len(v) for v in a] != [len(v) for v in b]:
                    return False
                flat_a = array("d", [x for v in a for x in v])
                flat_b = array("d", [x for v in b for x in v])
                if flat_a.tobytes() != flat_b.tobytes():
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        cols = ", ".join(f"{n}:{k}" for n, k in self.columns)
        return f"Frame([{cols}], {len(self.rows)} rows)"


def validate(frame: Frame, kind: RelationKind) -> list[str]:
    """Return the list of problems preventing ``frame`` from conforming to ``kind``.

    An empty list means the frame conforms. Extra columns are always allowed.
    """
    problems = []
    for name, want in kind.required.items():
        if name not in frame:
            problems.append(f"missing column {name!r}")
        elif frame.kind(name) != want:
            problems.append(
                f"column {name!r} has kind {frame.kind(name)}, expected {want}"
            )
    return problems


def conforms(frame: Frame, kind: RelationKind) -> bool:
    return not validate(frame, kind)


def require_kind(frame: Frame, kind: RelationKind) -> None:
    problems = validate(frame, kind)
    if problems:
        raise FrameError(f"frame does not conform to {kind.value}: " + "; ".join(problems))


def assign_ranks(frame: Frame) -> Frame:
    """Sort each qid group by score desc, docno asc and write a 0-based rank.

    Groups are emitted in order of first appearance. Python string ordering
    is by code point, which coincides with byte-wise UTF-8 ordering.
    """
    frame.require("qid", "docno", "score")
    qi, di, si = frame.index("qid"), frame.index("docno"), frame.index("score")
    rows = frame.rows
    if "rank" in frame:
        ri = frame.index("rank")
        columns = frame.columns[:ri] + (("rank", INTEGER),) + frame.columns[ri + 1 :]
    else:
        ri = len(frame.columns)
        columns = frame.columns + (("rank", INTEGER),)
    groups: dict[str, list[tuple]] = {}
    for row in rows:
        groups.setdefault(row[qi], []).append(row)
    out = []
    for members in groups.values():
        members.sort(key=lambda row: (-row[si], row[di]))
        for rank, row in enumerate(members):
            out.append(row[:ri] + (rank,) + row[ri + 1 :])
    return Frame(columns, tuple(out))


def concat_rows(a: Frame, b: Frame) -> Frame:
    if a.columns != b.columns:
        raise FrameError(f"schema mismatch: {a.columns} vs {b.columns}")
    return Frame(a.columns, a.rows + b.rows)


# TSV ----------------------------------------------------------------------

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def _escape(text: str) -> str:
    return "".join(_ESCAPES.get(c, c) for c in text)


def _unescape(text: str) -> str:
    if "\\" not in text:
        return text
    out = []
    it = iter(text)
    for c in it:
        if c == "\\":
            nxt = next(it, None)
            if nxt not in _UNESCAPES:
                raise FrameError(f"bad escape sequence in {text!r}")
            out.append(_UNESCAPES[nxt])
        else:
            out.append(c)
    return "".join(out)


def _format_value(value: Any, kind: str) -> str:
    if kind == TEXT:
        return _escape(value)
    if kind == REAL:
        return repr(value)
    if kind == INTEGER:
        return str(value)
    return ",".join(repr(v) for v in value)


def _parse_value(text: str, kind: str) -> Any:
    try:
        if kind == TEXT:
            return _unescape(text)
        if kind == REAL:
            return float(text)
        if kind == INTEGER:
            return coerce(int(text), INTEGER)
        return tuple(float(v) for v in text.split(",")) if text else ()
    except ValueError as e:
        raise FrameError(f"cannot parse {text!r} as {kind}: {e}") from None


def to_tsv(frame: Frame) -> str:
    """Serialise with a ``#kinds:`` schema line followed by a header row."""
    buf = io.StringIO()
    buf.write("#kinds:" + "\t".join(k for _, k in frame.columns) + "\n")
    buf.write("\t".join(_escape(n) for n in frame.names) + "\n")
    kinds = [k for _, k in frame.columns]
    for row in frame.rows:
        buf.write("\t".join(_format_value(v, k) for v, k in zip(row, kinds)) + "\n")
    return buf.getvalue()


def from_tsv(text: str) -> Frame:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 2 or not lines[0].startswith("#kinds:"):
        raise FrameError("TSV frame must start with a '#kinds:' line and a header")
    kinds = lines[0][len("#kinds:") :].split("\t") if lines[0] != "#kinds:" else []
    names = [_unescape(n) for n in lines[1].split("\t")] if lines[1] else []
    if len(kinds) != len(names):
        raise FrameError(f"{len(kinds)} kinds for {len(names)} columns")
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        fields = line.split("\t") if names else []
        if len(fields) != len(names):
            raise FrameError(f"line {lineno}: expected {len(names)} fields")
        rows.append(tuple(_parse_value(f, k) for f, k in zip(fields, kinds)))
    return Frame(tuple(zip(names, kinds)), tuple(rows))


def read_tsv(path: str | Path) -> Frame:
    return from_tsv(Path(path).read_text(encoding="utf-8"))


def write_tsv(frame: Frame, path: str | Path) -> None:
    Path(path).write_text(to_tsv(frame), encoding="utf-8")
