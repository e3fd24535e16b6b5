"""A small, fully deterministic retrieval stack.

BM25 over an on-disk inverted index, a document text store, a pointwise
term-overlap scorer (cacheable), a pairwise reranker whose scores depend on
the whole candidate pool (not cacheable), a toy query rewriter, and
instrumentation wrappers for counting calls and injecting latency.
"""

from __future__ import annotations

import math
import re
import struct
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .frame import INTEGER, REAL, TEXT, Frame, FrameError, RelationKind, assign_ranks, require_kind
from .pipeline import Leaf, Transformer

K1 = 1.2
B = 0.75
FORMAT_VERSION = 1

_TOKEN = re.compile(r"[^\W_]+")
_U32 = struct.Struct("<I")


class IndexFormatError(Exception):
    """Problems building, reading or writing an index."""


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _rows(corpus: Frame | Iterable[Mapping[str, Any]]) -> Iterable[Mapping[str, Any]]:
    if isinstance(corpus, Frame):
        return corpus.records()
    return corpus


class TextStore:
    """docno -> text lookup, stored in ordinal order beside the index."""

    def __init__(self, docnos: list[str], texts: list[str]):
        self.docnos = docnos
        self.texts = texts
        self._ordinal = {d: i for i, d in enumerate(docnos)}

    def __len__(self) -> int:
        return len(self.docnos)

    def __contains__(self, docno: object) -> bool:
        return docno in self._ordinal

    def get(self, docno: str) -> str:
        try:
            return self.texts[self._ordinal[docno]]
        except KeyError:
            raise KeyError(f"docno {docno!r} is not in the text store") from None

    def to_bytes(self) -> bytes:
        out = []
        for text in self.texts:
            raw = text.encode("utf-8")
            out.append(_U32.pack(len(raw)) + raw)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, docnos: list[str], data: bytes) -> TextStore:
        texts, pos = [], 0
        while pos < len(data):
            if pos + 4 > len(data):
                raise IndexFormatError("truncated texts file")
            (n,) = _U32.unpack_from(data, pos)
            pos += 4
            if pos + n > len(data):
                raise IndexFormatError("truncated texts file")
            texts.append(data[pos : pos + n].decode("utf-8"))
            pos += n
        if len(texts) != len(docnos):
            raise IndexFormatError(f"{len(texts)} texts for {len(docnos)} docnos")
        return cls(docnos, texts)


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[int, int]]]
    docnos: list[str]
    lengths: list[int]
    texts: TextStore
    k1: float = K1
    b: float = B
    path: Path | None = None
    _norms: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        avgdl = self.avgdl
        k1, b = self.k1, self.b
        self._norms = [k1 * (1 - b + b * dl / avgdl) if avgdl else k1 for dl in self.lengths]

    @property
    def num_docs(self) -> int:
        return len(self.docnos)

    @property
    def avgdl(self) -> float:
        return sum(self.lengths) / len(self.lengths) if self.lengths else 0.0

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        n, df = self.num_docs, self.df(term)
        return math.log((n - df + 0.5) / (df + 0.5) + 1)

    def score_query(self, query: str) -> dict[int, float]:
        """BM25 score per matching doc ordinal; query terms repeat as often as they occur."""
        scores: dict[int, float] = {}
        k1 = self.k1
        norms = self._norms
        for term in tokenize(query):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for ordinal, tf in plist:
                w = idf * tf * (k1 + 1) / (tf + norms[ordinal])
                scores[ordinal] = scores.get(ordinal, 0.0) + w
        return scores

    # persistence -------------------------------------------------------------

    def save(self, path: str | Path, force: bool = False) -> None:
        path = Path(path)
        if path.exists() and any(path.iterdir()) and not force:
            raise IndexFormatError(f"{path} already exists and is not empty")
        path.mkdir(parents=True, exist_ok=True)
        files = index_files(self)
        for name, data in files.items():
            (path / name).write_bytes(data)
        self.path = path

    @classmethod
    def load(cls, path: str | Path) -> InvertedIndex:
        path = Path(path)
        try:
            meta = _parse_meta((path / "meta").read_text(encoding="utf-8"))
            docnos_text = (path / "docnos").read_text(encoding="utf-8")
            postings_raw = (path / "postings").read_bytes()
            lengths_raw = (path / "lengths").read_bytes()
            texts_raw = (path / "texts").read_bytes()
        except FileNotFoundError as e:
            raise IndexFormatError(f"incomplete index at {path}: {e.filename}") from None
        if int(meta.get("format", -1)) != FORMAT_VERSION:
            raise IndexFormatError(f"unsupported index format {meta.get('format')!r}")
        docnos = docnos_text.split("\n")[:-1] if docnos_text else []
        n = int(meta["N"])
        if len(docnos) != n or len(lengths_raw) != 4 * n:
            raise IndexFormatError(f"index at {path} is inconsistent with N={n}")
        lengths = list(struct.unpack(f"<{n}I", lengths_raw))
        postings = _decode_postings(postings_raw)
        index = cls(
            postings=postings,
            docnos=docnos,
            lengths=lengths,
            texts=TextStore.from_bytes(docnos, texts_raw),
            k1=float(meta["k1"]),
            b=float(meta["b"]),
            path=path,
        )
        return index


def _parse_meta(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def _decode_postings(data: bytes) -> dict[str, list[tuple[int, int]]]:
    postings: dict[str, list[tuple[int, int]]] = {}
    pos = 0
    try:
        while pos < len(data):
            (tlen,) = _U32.unpack_from(data, pos)
            pos += 4
            term = data[pos : pos + tlen].decode("utf-8")
            pos += tlen
            (count,) = _U32.unpack_from(data, pos)
            pos += 4
            flat = struct.unpack_from(f"<{2 * count}I", data, pos)
            pos += 8 * count
            postings[term] = list(zip(flat[0::2], flat[1::2]))
    except struct.error as e:
        raise IndexFormatError(f"truncated postings file: {e}") from None
    return postings


def index_files(index: InvertedIndex) -> dict[str, bytes]:
    """The exact bytes of each file in an index directory."""
    meta = (
        f"format={FORMAT_VERSION}\n"
        f"N={index.num_docs}\n"
        f"avgdl={index.avgdl!r}\n"
        f"k1={index.k1!r}\n"
        f"b={index.b!r}\n"
        f"terms={len(index.postings)}\n"
    )
    docnos = "".join(d + "\n" for d in index.docnos)
    chunks = []
    for term in sorted(index.postings, key=lambda t: t.encode("utf-8")):
        plist = index.postings[term]
        raw = term.encode("utf-8")
        chunks.append(_U32.pack(len(raw)) + raw + _U32.pack(len(plist)))
        chunks.append(struct.pack(f"<{2 * len(plist)}I", *(x for p in plist for x in p)))
    return {
        "meta": meta.encode("utf-8"),
        "docnos": docnos.encode("utf-8"),
        "postings": b"".join(chunks),
        "lengths": struct.pack(f"<{index.num_docs}I", *index.lengths),
        "texts": index.texts.to_bytes(),
    }


def build_index(
    corpus: Frame | Iterable[Mapping[str, Any]], k1: float = K1, b: float = B
) -> InvertedIndex:
    """Index D rows (``docno`` and ``text``); ordinals follow arrival order."""
    docnos: list[str] = []
    texts: list[str] = []
    lengths: list[int] = []
    postings: dict[str, list[tuple[int, int]]] = {}
    seen: set[str] = set()
    for row in _rows(corpus):
        docno, text = row["docno"], row.get("text", "")
        if docno in seen:
            raise IndexFormatError(f"duplicate docno {docno!r}")
        if "\n" in docno:
            raise IndexFormatError(f"docno {docno!r} contains a newline")
        seen.add(docno)
        ordinal = len(docnos)
        docnos.append(docno)
        texts.append(text)
        tokens = tokenize(text)
        lengths.append(len(tokens))
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, []).append((ordinal, tf))
    return InvertedIndex(postings, docnos, lengths, TextStore(docnos, texts), k1, b)


def _resolve(index: InvertedIndex | str | Path) -> InvertedIndex:
    if isinstance(index, InvertedIndex):
        return index
    return InvertedIndex.load(index)


def _index_param(index: InvertedIndex) -> Any:
    return str(index.path) if index.path is not None else index


def bm25_retrieve(index: InvertedIndex, queries: Frame, num_results: int = 1000) -> Frame:
    require_kind(queries, RelationKind.Q)
    if num_results < 1:
        raise ValueError(f"num_results must be positive, got {num_results}")
    qcols = [c for c in queries.columns if c[0] not in ("docno", "score", "rank")]
    qidx = [queries.index(n) for n, _ in qcols]
    query_i = queries.index("query")
    docnos = index.docnos
    rows = []
    for row in queries.rows:
        scores = index.score_query(row[query_i])
        ranked = sorted(
            ((s, docnos[o]) for o, s in scores.items() if s > 0),
            key=lambda x: (-x[0], x[1]),
        )[:num_results]
        prefix = tuple(row[i] for i in qidx)
        rows.extend(prefix + (d, s, r) for r, (s, d) in enumerate(ranked))
    columns = tuple(qcols) + (("docno", TEXT), ("score", REAL), ("rank", INTEGER))
    return Frame(columns, tuple(rows))


def load_text(store: TextStore, results: Frame) -> Frame:
    results.require("docno")
    texts = []
    for docno in results.column("docno"):
        if docno not in store:
            raise KeyError(f"docno {docno!r} is not in the text store")
        texts.append(store.get(docno))
    return results.with_column("text", TEXT, texts)


def _texts(frame: Frame, store: TextStore | None) -> list[str]:
    if "text" in frame:
        return frame.column("text")
    if store is None:
        raise FrameError("frame has no text column and no text store was given")
    return load_text(store, frame).column("text")


def overlap_values(queries: list[str], texts: list[str]) -> list[float]:
    qterms: dict[str, set[str]] = {}
    out = []
    for q, t in zip(queries, texts):
        terms = qterms.get(q)
        if terms is None:
            terms = qterms[q] = set(tokenize(q))
        if not terms:
            out.append(0.0)
        else:
            out.append(len(terms & set(tokenize(t))) / len(terms))
    return out


def overlap_score(results: Frame, store: TextStore | None = None) -> Frame:
    """Fraction of distinct query terms present in the document text."""
    results.require("qid", "docno", "query")
    scores = overlap_values(results.column("query"), _texts(results, store))
    return assign_ranks(results.with_column("score", REAL, scores))


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def pairwise_rerank(results: Frame, store: TextStore | None = None) -> Frame:
    """score_i = sum over the other candidates j of sigmoid(o_i - o_j)."""
    results.require("qid", "docno", "query")
    o = overlap_values(results.column("query"), _texts(results, store))
    scores = [0.0] * len(results)
    for members in results.group_indices("qid").values():
        for i in members:
            total = 0.0
            for j in members:
                if j != i:
                    total += _sigmoid(o[i] - o[j])
            scores[i] = total
    return assign_ranks(results.with_column("score", REAL, scores))


def synonym_rewrite(queries: Frame) -> Frame:
    require_kind(queries, RelationKind.Q)
    rewritten = []
    for q in queries.column("query"):
        tokens = tokenize(q)
        rewritten.append(f"{q} {tokens[0]}" if tokens else q)
    return queries.with_column("query", TEXT, rewritten)


# leaves ---------------------------------------------------------------------


class BM25(Leaf):
    def __init__(self, index: InvertedIndex | str | Path, num_results: int = 1000):
        self.index_ = _resolve(index)
        super().__init__("bm25", {"index": _index_param(self.index_), "num_results": num_results})
        self.num_results = num_results

    def transform(self, frame: Frame) -> Frame:
        return bm25_retrieve(self.index_, frame, self.num_results)


class TextLoader(Leaf):
    def __init__(self, index: InvertedIndex | str | Path):
        self.index_ = _resolve(index)
        super().__init__("text_loader", {"index": _index_param(self.index_)})

    def transform(self, frame: Frame) -> Frame:
        return load_text(self.index_.texts, frame)


class _StoreScorer(Leaf):
    kind_name = ""

    def __init__(self, index: InvertedIndex | str | Path | None = None):
        self.index_ = _resolve(index) if index is not None else None
        params = {"index": _index_param(self.index_)} if self.index_ is not None else {}
        super().__init__(self.kind_name, params)

    @property
    def store(self) -> TextStore | None:
        return self.index_.texts if self.index_ is not None else None


class OverlapScorer(_StoreScorer):
    """Pointwise stand-in for a cross-encoder: cacheable per (query, docno)."""

    kind_name = "mono"

    def transform(self, frame: Frame) -> Frame:
        return overlap_score(frame, self.store)


class PairwiseReranker(_StoreScorer):
    """Pool-dependent stand-in for a pairwise reranker: not cacheable."""

    kind_name = "duo"

    def transform(self, frame: Frame) -> Frame:
        return pairwise_rerank(frame, self.store)


class SynonymRewrite(Leaf):
    def __init__(self) -> None:
        super().__init__("rewrite", {})

    def transform(self, frame: Frame) -> Frame:
        return synonym_rewrite(frame)


# instrumentation --------------------------------------------------------------


class Counted(Transformer):
    """Output-transparent wrapper counting calls and rows."""

    def __init__(self, inner: Transformer):
        self.inner = inner
        self.invocations = 0
        self.rows_in = 0
        self.rows_out = 0
        self._lock = threading.Lock()

    def transform(self, frame: Frame) -> Frame:
        out = self.inner.transform(frame)
        with self._lock:
            self.invocations += 1
            self.rows_in += len(frame)
            self.rows_out += len(out)
        return out

    def reset(self) -> None:
        with self._lock:
            self.invocations = self.rows_in = self.rows_out = 0

    def counts(self) -> dict[str, int]:
        return {"invocations": self.invocations, "rows_in": self.rows_in, "rows_out": self.rows_out}


def with_counter(t: Transformer) -> Counted:
    return Counted(t)


class Latency(Transformer):
    """Simulates an expensive stage by sleeping per call and per row.

    Rows are charged as ``max(rows in, rows out)`` so that a retriever pays
    for the results it produces, not just the queries it receives.
    """

    def __init__(self, inner: Transformer, per_call_ms: float = 0.0, per_row_ms: float = 0.0):
        self.inner = inner
        self.per_call_ms = per_call_ms
        self.per_row_ms = per_row_ms

    def transform(self, frame: Frame) -> Frame:
        out = self.inner.transform(frame)
        delay = self.per_call_ms + max(len(frame), len(out)) * self.per_row_ms
        if delay > 0:
            time.sleep(delay / 1000.0)
        return out


def with_latency(t: Transformer, per_call_ms: float = 0.0, per_row_ms: float = 0.0) -> Latency:
    return Latency(t, per_call_ms, per_row_ms)


# synthetic data ----------------------------------------------------------------

_MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias."""
        if n <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next()
            if x < limit:
                return x % n


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    seed: int = 7
    num_docs: int = 5000
    vocab_size: int = 500
    doc_len_min: int = 20
    doc_len_max: int = 60
    num_queries: int = 50
    query_len: int = 3

    def check(self) -> None:
        if not 0 <= self.seed <= _MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.num_docs < 0 or self.num_queries < 0:
            raise ValueError("document and query counts must be non-negative")
        if not self.vocab_size >= self.query_len >= 1:
            raise ValueError("need vocab_size >= query_len >= 1")
        if not 0 <= self.doc_len_min <= self.doc_len_max:
            raise ValueError("need 0 <= doc_len_min <= doc_len_max")


@dataclass(frozen=True)
class SyntheticData:
    corpus: Frame
    topics: Frame
    qrels: Frame


def synth_corpus(spec: SyntheticCorpusSpec) -> SyntheticData:
    spec.check()
    rng = SplitMix64(spec.seed)
    vocab = [f"w{i}" for i in range(spec.vocab_size)]
    docs = []
    doc_terms = []
    for i in range(spec.num_docs):
        length = spec.doc_len_min + rng.below(spec.doc_len_max - spec.doc_len_min + 1)
        words = [vocab[rng.below(spec.vocab_size)] for _ in range(length)]
        docs.append((f"d{i}", " ".join(words)))
        doc_terms.append(set(words))
    topics = []
    for j in range(spec.num_queries):
        # partial Fisher-Yates: query_len distinct words
        pool = list(range(spec.vocab_size))
        picked = []
        for m in range(spec.query_len):
            r = m + rng.below(spec.vocab_size - m)
            pool[m], pool[r] = pool[r], pool[m]
            picked.append(vocab[pool[m]])
        topics.append((f"q{j}", " ".join(picked)))
    need = math.ceil(spec.query_len / 2)
    qrels = []
    for qid, query in topics:
        terms = set(query.split())
        for (docno, _), dterms in zip(docs, doc_terms):
            if len(terms & dterms) >= need:
                qrels.append((qid, docno, 1))
    return SyntheticData(
        corpus=Frame((("docno", TEXT), ("text", TEXT)), tuple(docs)),
        topics=Frame((("qid", TEXT), ("query", TEXT)), tuple(topics)),
        qrels=Frame((("qid", TEXT), ("docno", TEXT), ("label", INTEGER)), tuple(qrels)),
    )


def toy_registry(index: InvertedIndex | str | Path | None = None) -> dict[str, Any]:
    """Leaf factories for the pipeline language.

    ``index`` is the default for leaves that need one; an explicit
    ``index='path'`` argument in an expression overrides it.
    """
    default = _resolve(index) if index is not None else None
    loaded: dict[str, InvertedIndex] = {}

    def pick(path: str | None) -> InvertedIndex | None:
        if path is None or (default is not None and str(default.path) == path):
            return default
        if path not in loaded:
            loaded[path] = InvertedIndex.load(path)
        return loaded[path]

    def need(path: str | None) -> InvertedIndex:
        found = pick(path)
        if found is None:
            raise ValueError("this leaf needs an index")
        return found

    def defaulted(leaf: Leaf, path: str | None) -> Leaf:
        if path is None and "index" in leaf.params:
            leaf.implicit = frozenset({"index"})
        return leaf

    return {
        "bm25": lambda index=None, num_results=1000: defaulted(
            BM25(need(index), num_results), index
        ),
        "text_loader": lambda index=None: defaulted(TextLoader(need(index)), index),
        "mono": lambda index=None: defaulted(OverlapScorer(pick(index)), index),
        "duo": lambda index=None: defaulted(PairwiseReranker(pick(index)), index),
        "rewrite": lambda: SynonymRewrite(),
    }
