import math

import pytest
from hypothesis import strategies as st

from pipecache.frame import INTEGER, REAL, REAL_LIST, TEXT, Frame
from pipecache.retrieval import build_index, toy_registry

TINY_CORPUS = Frame.from_rows(
    [("docno", TEXT), ("text", TEXT)],
    [("d1", "a b"), ("d2", "a a"), ("d3", "c")],
)


@pytest.fixture
def tiny_index():
    return build_index(TINY_CORPUS)


@pytest.fixture
def tiny_registry(tiny_index):
    return toy_registry(tiny_index)


def r_frame(rows):
    """R-frame from (qid, docno, score) triples; ranks left to the caller."""
    return Frame.from_rows([("qid", TEXT), ("docno", TEXT), ("score", REAL)], rows)


# hypothesis strategies ----------------------------------------------------

texts = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=12)
reals = st.floats(allow_nan=True, allow_infinity=True, width=64)
integers = st.integers(min_value=-(2**63), max_value=2**63 - 1)
real_lists = st.lists(reals, max_size=4)

_VALUES = {TEXT: texts, REAL: reals, INTEGER: integers, REAL_LIST: real_lists}


# TSV cannot carry NaN payload bits, so text-format tests use the canonical NaN
_PLAIN = {**_VALUES, REAL: st.floats(allow_nan=False, width=64), REAL_LIST: st.lists(
    st.floats(allow_nan=False, width=64), max_size=4)}
_NAME = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\t\n\r\\"),
    min_size=1,
    max_size=6,
)


@st.composite
def frames(draw, max_rows=6, nan=True):
    values = _VALUES if nan else _PLAIN
    names = draw(st.lists(_NAME, min_size=0, max_size=4, unique=True))
    kinds = [draw(st.sampled_from(list(values))) for _ in names]
    n = draw(st.integers(0, max_rows))
    rows = [tuple(draw(values[k]) for k in kinds) for _ in range(n)]
    return Frame(tuple(zip(names, kinds)), tuple(rows))


@st.composite
def result_frames(draw, qids=("q1", "q2"), docs=6):
    """R-frames with unique (qid, docno) and small-integer-valued scores (ties likely)."""
    rows = []
    for q in draw(st.lists(st.sampled_from(qids), unique=True, max_size=len(qids))):
        ds = draw(st.lists(st.integers(0, docs - 1), unique=True, max_size=docs))
        for d in ds:
            rows.append((q, f"d{d}", float(draw(st.integers(-3, 3)))))
    return r_frame(rows)


def same_bits(a: float, b: float) -> bool:
    return math.copysign(1, a) == math.copysign(1, b) and (a == b or (a != a and b != b))


# acceptance summary -------------------------------------------------------


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(report, "user_properties", ()))
            if "criterion" in props and report.when == "call":
                number, title = props["criterion"]
                verdict = "PASS" if outcome == "passed" else "FAIL"
                lines.append((number, f"criterion {number:>2}: {verdict}  {title} ({report.duration:.1f}s)"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
